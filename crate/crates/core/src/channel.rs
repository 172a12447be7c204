//! Channel realizations and composite channels.
//!
//! Conventions used everywhere in the crate:
//!
//! * Array element `(p, q)` of an `n_y x n_z` grid sits at `p` spacings along
//!   the array's horizontal in-plane axis and `q` spacings along the vertical
//!   axis; it is stored at flat index `p * n_z + q`.
//! * For a unit direction `d` leaving the array, azimuth is measured from the
//!   panel normal towards the in-plane axis and elevation from the horizontal,
//!   so `d . u = sin(az) cos(el)` and `d . z = sin(el)`. The steering entry of
//!   element `(p, q)` is `exp(j 2 pi s (p sin(az) cos(el) + q sin(el)))`.
//! * Stored vectors `v`, `g` and effective channels `h` are the conjugates of
//!   the physical coefficient rows: a user receives `h^H x`. The tile-`t`
//!   cascade is `h^H = g^H diag(phi) F`.

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;
use std::io::{Read, Write};

use crate::codebook::Codebook;
use crate::codeword::CodewordSelection;
use crate::error::{Error, Result};
use crate::scenario::{ScenarioConfig, TrafficType, SPEED_OF_LIGHT};

pub type CVector = DVector<Complex64>;
pub type CMatrix = DMatrix<Complex64>;

/// One channel realization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub num_antennas: usize,
    /// Direct BS-user channel `v[k]`, including the blockage attenuation.
    pub direct: Vec<CVector>,
    /// BS-to-tile channel `F[t]` (`Q x N_T`).
    pub bs_to_tile: Vec<CMatrix>,
    /// Tile-to-user channel `g[t][k]` (length `Q`).
    pub tile_to_user: Vec<Vec<CVector>>,
    /// Effective channel `h[t][m][k]` of each online codeword; empty until
    /// [`ChannelSet::attach_effective`] is called.
    pub effective: Vec<Vec<Vec<CVector>>>,
    pub traffic: Vec<TrafficType>,
    pub user_positions: Vec<[f64; 3]>,
}

/// Local frame of a planar array: normal, horizontal in-plane axis, vertical axis.
#[derive(Debug, Clone, Copy)]
pub struct ArrayFrame {
    pub normal: Vector3<f64>,
    pub horizontal: Vector3<f64>,
    pub vertical: Vector3<f64>,
}

impl ArrayFrame {
    pub fn facing(azimuth_deg: f64) -> Self {
        let phi = azimuth_deg.to_radians();
        let normal = Vector3::new(phi.cos(), phi.sin(), 0.0);
        let vertical = Vector3::z();
        Self {
            normal,
            horizontal: vertical.cross(&normal),
            vertical,
        }
    }

    /// `(azimuth, elevation)` of the unit direction `d` in this frame.
    pub fn angles(&self, d: &Vector3<f64>) -> (f64, f64) {
        let el = d.dot(&self.vertical).clamp(-1.0, 1.0).asin();
        let az = d.dot(&self.horizontal).atan2(d.dot(&self.normal));
        (az, el)
    }
}

pub fn steering_vector(grid: (usize, usize), spacing: f64, azimuth: f64, elevation: f64) -> CVector {
    steering_from_direction_cosines(grid, spacing, azimuth.sin() * elevation.cos(), elevation.sin())
}

/// Steering vector parameterized directly by `(sin(az) cos(el), sin(el))`.
pub fn steering_from_direction_cosines(grid: (usize, usize), spacing: f64, u: f64, v: f64) -> CVector {
    let (ny, nz) = grid;
    CVector::from_iterator(
        ny * nz,
        (0..ny).flat_map(|p| {
            (0..nz).map(move |q| Complex64::from_polar(1.0, 2.0 * PI * spacing * (p as f64 * u + q as f64 * v)))
        }),
    )
}

/// Amplitude gain of a log-distance link with a free-space reference at 1 m.
pub fn path_gain(distance: f64, carrier_hz: f64, exponent: f64, extra_atten_db: f64) -> Result<f64> {
    if !(distance > 0.0) {
        return Err(Error::Geometry(format!("link distance {distance} must be positive")));
    }
    let pl_ref = 20.0 * (4.0 * PI * carrier_hz / SPEED_OF_LIGHT).log10();
    let pl = pl_ref + 10.0 * exponent * distance.log10() + extra_atten_db;
    Ok(10f64.powf(-pl / 20.0))
}

/// `(g^H diag(phi) F)^H`, i.e. `F^H (conj(phi) .* g)`.
pub fn effective_tile_channel(g: &CVector, phi: &CVector, f: &CMatrix) -> Result<CVector> {
    if g.len() != phi.len() || f.nrows() != g.len() {
        return Err(Error::Dimension(format!(
            "g has {} entries, phi {}, F is {}x{}",
            g.len(),
            phi.len(),
            f.nrows(),
            f.ncols()
        )));
    }
    let weighted = CVector::from_iterator(g.len(), g.iter().zip(phi.iter()).map(|(g, p)| p.conj() * g));
    Ok(f.adjoint() * weighted)
}

/// `v_k + sum_t h[t][m_t][k]` for every user, for a one-hot selection.
pub fn composite_channel(
    direct: &[CVector],
    selection: &CodewordSelection,
    effective: &[Vec<Vec<CVector>>],
) -> Result<Vec<CVector>> {
    let chosen = selection.one_hot_indices()?;
    if chosen.len() != effective.len() {
        return Err(Error::Dimension(format!(
            "selection has {} tiles, channels have {}",
            chosen.len(),
            effective.len()
        )));
    }
    Ok(direct
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let mut h = v.clone();
            for (t, &m) in chosen.iter().enumerate() {
                h += &effective[t][m][k];
            }
            h
        })
        .collect())
}

fn complex_gaussian(rng: &mut impl Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn rician_weights(kappa: f64) -> (f64, f64) {
    if kappa.is_infinite() {
        (1.0, 0.0)
    } else {
        ((kappa / (1.0 + kappa)).sqrt(), (1.0 / (1.0 + kappa)).sqrt())
    }
}

fn vec3(p: [f64; 3]) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

/// Reference-element position and frame of every tile.
pub fn tile_layout(cfg: &ScenarioConfig) -> Vec<(Vector3<f64>, ArrayFrame)> {
    let lambda = cfg.wavelength();
    let step = cfg.element_spacing * lambda;
    let [qy, qz] = cfg.tile_grid;
    let span_y = (cfg.tiles_per_irs * qy) as f64 - 1.0;
    let mut out = Vec::with_capacity(cfg.num_tiles());
    for irs in cfg.geometry.irs.iter().take(cfg.num_irs) {
        let frame = ArrayFrame::facing(irs.facing_deg);
        for tau in 0..cfg.tiles_per_irs {
            let along = ((tau * qy) as f64 - span_y / 2.0) * step;
            let up = -((qz as f64 - 1.0) / 2.0) * step;
            out.push((vec3(irs.position) + frame.horizontal * along + frame.vertical * up, frame));
        }
    }
    out
}

pub(crate) fn bs_reference(cfg: &ScenarioConfig) -> (Vector3<f64>, ArrayFrame) {
    let frame = ArrayFrame::facing(cfg.geometry.bs_facing_deg);
    let step = cfg.element_spacing * cfg.wavelength();
    let [gy, gz] = cfg.bs_grid();
    let pos = vec3(cfg.geometry.bs_position) - frame.horizontal * ((gy as f64 - 1.0) / 2.0 * step)
        - frame.vertical * ((gz as f64 - 1.0) / 2.0 * step);
    (pos, frame)
}

pub(crate) fn unit_direction(from: &Vector3<f64>, to: &Vector3<f64>) -> Result<(Vector3<f64>, f64)> {
    let d = to - from;
    let dist = d.norm();
    if !(dist > 1e-9) {
        return Err(Error::Geometry(format!("coincident positions at {:?}", from.as_slice())));
    }
    Ok((d / dist, dist))
}

/// Draws one realization of every link from the configured geometry.
///
/// IRS links are Rician (LoS steering product plus i.i.d. complex Gaussian
/// scatter); direct links are Rayleigh with the blockage attenuation applied.
/// The same `(cfg, seed)` always yields the same channels.
pub fn synthesize_channels(cfg: &ScenarioConfig, seed: u64) -> Result<ChannelSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k_users = cfg.num_users();
    let user_positions: Vec<[f64; 3]> = match &cfg.geometry.user_positions {
        Some(p) => p.clone(),
        None => {
            let r = &cfg.geometry.user_region;
            (0..k_users)
                .map(|_| {
                    [
                        r.x[0] + (r.x[1] - r.x[0]) * rng.random::<f64>(),
                        r.y[0] + (r.y[1] - r.y[0]) * rng.random::<f64>(),
                        r.height,
                    ]
                })
                .collect()
        }
    };

    let lambda = cfg.wavelength();
    let s = cfg.element_spacing;
    let [qy, qz] = cfg.tile_grid;
    let tile_grid = (qy, qz);
    let [gy, gz] = cfg.bs_grid();
    let bs_grid = (gy, gz);
    let prop = &cfg.propagation;
    let kappa = 10f64.powf(prop.rician_k_db / 10.0);
    let (w_los, w_nlos) = rician_weights(kappa);
    let (bs_pos, bs_frame) = bs_reference(cfg);
    let tiles = tile_layout(cfg);
    let n_t = cfg.num_bs_antennas;
    let q = cfg.elements_per_tile();
    let k_wave = 2.0 * PI / lambda;

    let mut bs_to_tile = Vec::with_capacity(tiles.len());
    for (tile_pos, tile_frame) in &tiles {
        let (d_bt, dist) = unit_direction(&bs_pos, tile_pos)?;
        let gain = path_gain(dist, cfg.carrier_hz, prop.irs_pathloss_exponent, 0.0)?;
        let (az_b, el_b) = bs_frame.angles(&d_bt);
        let (az_t, el_t) = tile_frame.angles(&(-d_bt));
        let a_bs = steering_vector(bs_grid, s, az_b, el_b);
        let a_tile = steering_vector(tile_grid, s, az_t, el_t);
        let phase = Complex64::from_polar(1.0, -k_wave * dist);
        let los = &a_tile * a_bs.transpose() * phase;
        let f = CMatrix::from_fn(q, n_t, |r, c| gain * (w_los * los[(r, c)] + w_nlos * complex_gaussian(&mut rng)));
        bs_to_tile.push(f);
    }

    let mut tile_to_user = Vec::with_capacity(tiles.len());
    for (tile_pos, tile_frame) in &tiles {
        let mut per_user = Vec::with_capacity(k_users);
        for pos in &user_positions {
            let (d_tu, dist) = unit_direction(tile_pos, &vec3(*pos))?;
            let gain = path_gain(dist, cfg.carrier_hz, prop.irs_pathloss_exponent, 0.0)?;
            let (az, el) = tile_frame.angles(&d_tu);
            let a = steering_vector(tile_grid, s, az, el);
            let phase = Complex64::from_polar(1.0, -k_wave * dist);
            // stored as the conjugate of the physical coefficient row
            let g = CVector::from_fn(q, |i, _| {
                (gain * (w_los * a[i] * phase + w_nlos * complex_gaussian(&mut rng))).conj()
            });
            per_user.push(g);
        }
        tile_to_user.push(per_user);
    }

    let mut direct = Vec::with_capacity(k_users);
    for pos in &user_positions {
        let (_, dist) = unit_direction(&vec3(cfg.geometry.bs_position), &vec3(*pos))?;
        let gain = path_gain(dist, cfg.carrier_hz, prop.direct_pathloss_exponent, cfg.direct_blockage_db)?;
        direct.push(CVector::from_fn(n_t, |_, _| gain * complex_gaussian(&mut rng)));
    }

    Ok(ChannelSet {
        num_antennas: n_t,
        direct,
        bs_to_tile,
        tile_to_user,
        effective: Vec::new(),
        traffic: (0..k_users).map(|k| cfg.traffic_type(k)).collect(),
        user_positions,
    })
}

impl ChannelSet {
    pub fn num_users(&self) -> usize {
        self.direct.len()
    }

    pub fn num_tiles(&self) -> usize {
        self.bs_to_tile.len()
    }

    pub fn num_online(&self) -> usize {
        self.effective.first().map_or(0, |t| t.len())
    }

    /// Fills `effective[t][m][k]` for the codebook's online words.
    pub fn attach_effective(&mut self, codebook: &Codebook) -> Result<()> {
        let mut eff = Vec::with_capacity(self.num_tiles());
        for t in 0..self.num_tiles() {
            let mut per_word = Vec::with_capacity(codebook.online.len());
            for m in 0..codebook.online.len() {
                let phi = codebook.online_word(t, m);
                let per_user = self.tile_to_user[t]
                    .iter()
                    .map(|g| effective_tile_channel(g, &phi, &self.bs_to_tile[t]))
                    .collect::<Result<Vec<_>>>()?;
                per_word.push(per_user);
            }
            eff.push(per_word);
        }
        self.effective = eff;
        Ok(())
    }

    /// Composite channels when tile `t` applies the arbitrary phase vector `phases[t]`.
    pub fn composite_with_phases(&self, phases: &[CVector]) -> Result<Vec<CVector>> {
        if phases.len() != self.num_tiles() {
            return Err(Error::Dimension(format!(
                "{} phase vectors for {} tiles",
                phases.len(),
                self.num_tiles()
            )));
        }
        (0..self.num_users())
            .map(|k| {
                let mut h = self.direct[k].clone();
                for (t, phi) in phases.iter().enumerate() {
                    h += effective_tile_channel(&self.tile_to_user[t][k], phi, &self.bs_to_tile[t])?;
                }
                Ok(h)
            })
            .collect()
    }

    /// Writes the realization as CSV rows `block,t,m,k,row,col,re,im`.
    ///
    /// Blocks: `v` (k,row), `F` (t,row,col), `g` (t,k,row), `h` (t,m,k,row),
    /// `type` (k; re = 0 eMBB, 1 URLLC) and `pos` (k,row; re = coordinate).
    /// Unused index columns are written as 0.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["block", "t", "m", "k", "row", "col", "re", "im"])?;
        let mut rec = |block: &str, t: usize, m: usize, k: usize, row: usize, col: usize, z: Complex64| {
            w.write_record([
                block.to_string(),
                t.to_string(),
                m.to_string(),
                k.to_string(),
                row.to_string(),
                col.to_string(),
                format!("{:e}", z.re),
                format!("{:e}", z.im),
            ])
        };
        for (k, ty) in self.traffic.iter().enumerate() {
            let code = if *ty == TrafficType::Urllc { 1.0 } else { 0.0 };
            rec("type", 0, 0, k, 0, 0, Complex64::new(code, 0.0))?;
            for (row, c) in self.user_positions[k].iter().enumerate() {
                rec("pos", 0, 0, k, row, 0, Complex64::new(*c, 0.0))?;
            }
        }
        for (k, v) in self.direct.iter().enumerate() {
            for (row, z) in v.iter().enumerate() {
                rec("v", 0, 0, k, row, 0, *z)?;
            }
        }
        for (t, f) in self.bs_to_tile.iter().enumerate() {
            for row in 0..f.nrows() {
                for col in 0..f.ncols() {
                    rec("F", t, 0, 0, row, col, f[(row, col)])?;
                }
            }
        }
        for (t, per_user) in self.tile_to_user.iter().enumerate() {
            for (k, g) in per_user.iter().enumerate() {
                for (row, z) in g.iter().enumerate() {
                    rec("g", t, 0, k, row, 0, *z)?;
                }
            }
        }
        for (t, per_word) in self.effective.iter().enumerate() {
            for (m, per_user) in per_word.iter().enumerate() {
                for (k, h) in per_user.iter().enumerate() {
                    for (row, z) in h.iter().enumerate() {
                        rec("h", t, m, k, row, 0, *z)?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        struct Entry {
            block: String,
            idx: [usize; 5],
            z: Complex64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 8 {
                return Err(Error::Dimension(format!("channel CSV row has {} fields", rec.len())));
            }
            let parse_u = |i: usize| {
                rec[i]
                    .parse::<usize>()
                    .map_err(|e| Error::InvalidConfig(format!("bad index '{}': {e}", &rec[i])))
            };
            let parse_f = |i: usize| {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidConfig(format!("bad value '{}': {e}", &rec[i])))
            };
            entries.push(Entry {
                block: rec[0].to_string(),
                idx: [parse_u(1)?, parse_u(2)?, parse_u(3)?, parse_u(4)?, parse_u(5)?],
                z: Complex64::new(parse_f(6)?, parse_f(7)?),
            });
        }
        let max_of = |block: &str, i: usize| {
            entries
                .iter()
                .filter(|e| e.block == block)
                .map(|e| e.idx[i] + 1)
                .max()
                .unwrap_or(0)
        };
        let k_users = max_of("v", 2);
        let n_t = max_of("v", 3);
        let tiles = max_of("F", 0);
        let q = max_of("F", 3);
        let words = max_of("h", 1);
        let zero = Complex64::new(0.0, 0.0);
        let mut set = ChannelSet {
            num_antennas: n_t,
            direct: vec![CVector::from_element(n_t, zero); k_users],
            bs_to_tile: vec![CMatrix::from_element(q, n_t, zero); tiles],
            tile_to_user: vec![vec![CVector::from_element(q, zero); k_users]; tiles],
            effective: vec![vec![vec![CVector::from_element(n_t, zero); k_users]; words]; if words > 0 { tiles } else { 0 }],
            traffic: vec![TrafficType::Embb; k_users],
            user_positions: vec![[0.0; 3]; k_users],
        };
        let oob = || Error::Dimension("channel CSV index out of range".into());
        for e in entries {
            let [t, m, k, row, col] = e.idx;
            match e.block.as_str() {
                "type" => {
                    *set.traffic.get_mut(k).ok_or_else(oob)? = if e.z.re > 0.5 {
                        TrafficType::Urllc
                    } else {
                        TrafficType::Embb
                    }
                }
                "pos" => *set.user_positions.get_mut(k).and_then(|p| p.get_mut(row)).ok_or_else(oob)? = e.z.re,
                "v" => *set.direct.get_mut(k).and_then(|v| v.get_mut(row)).ok_or_else(oob)? = e.z,
                "F" => {
                    let f = set.bs_to_tile.get_mut(t).ok_or_else(oob)?;
                    if row >= f.nrows() || col >= f.ncols() {
                        return Err(oob());
                    }
                    f[(row, col)] = e.z;
                }
                "g" => {
                    *set.tile_to_user
                        .get_mut(t)
                        .and_then(|u| u.get_mut(k))
                        .and_then(|g| g.get_mut(row))
                        .ok_or_else(oob)? = e.z
                }
                "h" => {
                    *set.effective
                        .get_mut(t)
                        .and_then(|w| w.get_mut(m))
                        .and_then(|u| u.get_mut(k))
                        .and_then(|h| h.get_mut(row))
                        .ok_or_else(oob)? = e.z
                }
                other => return Err(Error::InvalidConfig(format!("unknown channel block '{other}'"))),
            }
        }
        Ok(set)
    }
}
