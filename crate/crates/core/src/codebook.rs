//! Reflection and wavefront-phase codebooks and per-user preselection.
//!
//! A combined codeword is a reflection word times a global wavefront phase
//! `exp(j psi)`. Online codewords are indexed `m = 0..M` and sorted by
//! `(reflection, phase)`.

use log::warn;
use num_complex::Complex64;
use std::f64::consts::PI;
use std::io::Write;

use crate::channel::{bs_reference, effective_tile_channel, steering_vector, tile_layout, unit_direction, CVector, ChannelSet};
use crate::error::{Error, Result};
use crate::scenario::{Aggregation, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct OnlineWord {
    pub reflection: usize,
    pub phase: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub tile_grid: (usize, usize),
    /// Reflection direction grid `(M_y, M_z)`.
    pub direction_grid: (usize, usize),
    /// `(azimuth, elevation)` of each reflection word.
    pub directions: Vec<(f64, f64)>,
    /// `reflection[t][r]`: word `r` specialized to the incident direction of tile `t`.
    pub reflection: Vec<Vec<CVector>>,
    pub wavefront: Vec<f64>,
    /// Per user, the preselected reflection indices, best first.
    pub preselected: Vec<Vec<usize>>,
    pub online: Vec<OnlineWord>,
}

/// Factor pair `(M_y, M_z)` of `m_t` whose aspect ratio is closest to the tile's.
pub fn direction_grid(m_t: usize, tile_grid: (usize, usize)) -> (usize, usize) {
    let target = (tile_grid.0 as f64 / tile_grid.1 as f64).ln();
    let mut best = (m_t, 1);
    let mut best_err = f64::INFINITY;
    for my in 1..=m_t {
        if m_t % my == 0 {
            let mz = m_t / my;
            let err = ((my as f64 / mz as f64).ln() - target).abs();
            if err < best_err - 1e-12 {
                best = (my, mz);
                best_err = err;
            }
        }
    }
    if best_err > 2f64.ln() {
        warn!(
            "codebook size {m_t} has no factorization near the {}x{} tile aspect; using {}x{}",
            tile_grid.0, tile_grid.1, best.0, best.1
        );
    }
    best
}

/// Uniform angular grid over `(-pi/2, pi/2)` in azimuth and elevation, azimuth-major.
pub fn reflection_directions(grid: (usize, usize)) -> Vec<(f64, f64)> {
    let cell = |i: usize, n: usize| -PI / 2.0 + (i as f64 + 0.5) * PI / n as f64;
    (0..grid.0)
        .flat_map(|i| (0..grid.1).map(move |j| (cell(i, grid.0), cell(j, grid.1))))
        .collect()
}

/// Reflection words for one tile: word `m` cancels the incident steering
/// profile and steers towards the `m`-th grid direction.
pub fn build_reflection_codebook(
    tile_grid: (usize, usize),
    m_t: usize,
    spacing: f64,
    incident: (f64, f64),
) -> Result<Vec<CVector>> {
    if m_t == 0 {
        return Err(Error::InvalidConfig("reflection codebook must have at least one word".into()));
    }
    let a_in = steering_vector(tile_grid, spacing, incident.0, incident.1);
    Ok(reflection_directions(direction_grid(m_t, tile_grid))
        .into_iter()
        .map(|(az, el)| {
            let a_out = steering_vector(tile_grid, spacing, az, el);
            a_out.zip_map(&a_in, |o, i| (o * i).conj())
        })
        .collect())
}

pub fn build_wavefront_codebook(b0: usize) -> Result<Vec<f64>> {
    if b0 == 0 {
        return Err(Error::InvalidConfig("wavefront codebook must have at least one phase".into()));
    }
    Ok((0..b0).map(|i| 2.0 * PI * i as f64 / b0 as f64).collect())
}

impl Codebook {
    /// Builds the offline codebooks for every tile of the configured geometry.
    /// No words are online until [`Codebook::preselect`] runs.
    pub fn build(cfg: &ScenarioConfig) -> Result<Self> {
        let tile_grid = (cfg.tile_grid[0], cfg.tile_grid[1]);
        let (bs_pos, _) = bs_reference(cfg);
        let reflection = tile_layout(cfg)
            .iter()
            .map(|(pos, frame)| {
                let (d, _) = unit_direction(pos, &bs_pos)?;
                build_reflection_codebook(tile_grid, cfg.reflection_codebook_size, cfg.element_spacing, frame.angles(&d))
            })
            .collect::<Result<Vec<_>>>()?;
        let grid = direction_grid(cfg.reflection_codebook_size, tile_grid);
        Ok(Self {
            tile_grid,
            direction_grid: grid,
            directions: reflection_directions(grid),
            reflection,
            wavefront: build_wavefront_codebook(cfg.wavefront_codebook_size)?,
            preselected: Vec::new(),
            online: Vec::new(),
        })
    }

    pub fn num_reflection(&self) -> usize {
        self.directions.len()
    }

    pub fn num_online(&self) -> usize {
        self.online.len()
    }

    pub fn combined_word(&self, tile: usize, reflection: usize, phase: usize) -> CVector {
        &self.reflection[tile][reflection] * Complex64::from_polar(1.0, self.wavefront[phase])
    }

    pub fn online_word(&self, tile: usize, m: usize) -> CVector {
        let w = self.online[m];
        self.combined_word(tile, w.reflection, w.phase)
    }

    /// `score[k][r]`: aggregated `||h_eff[t, r, k]||^2` over tiles. The
    /// wavefront phase does not change the norm, so one score per reflection word suffices.
    pub fn reflection_scores(&self, channels: &ChannelSet, aggregation: Aggregation) -> Result<Vec<Vec<f64>>> {
        let k_users = channels.num_users();
        let mut scores = vec![vec![0.0; self.num_reflection()]; k_users];
        for t in 0..channels.num_tiles() {
            for (r, word) in self.reflection[t].iter().enumerate() {
                for (k, row) in scores.iter_mut().enumerate() {
                    let p = effective_tile_channel(&channels.tile_to_user[t][k], word, &channels.bs_to_tile[t])?
                        .norm_squared();
                    row[r] = match aggregation {
                        Aggregation::Sum => row[r] + p,
                        Aggregation::Max => row[r].max(p),
                    };
                }
            }
        }
        Ok(scores)
    }

    /// Keeps the `per_user` strongest reflection words of every user and puts
    /// each of them online with every wavefront phase.
    ///
    /// `word_cap` bounds the number of distinct reflection words; words are
    /// admitted rank by rank, users in index order, so every user's best word
    /// survives whenever `word_cap >= K`.
    pub fn preselect(
        &mut self,
        channels: &ChannelSet,
        per_user: usize,
        aggregation: Aggregation,
        word_cap: Option<usize>,
    ) -> Result<()> {
        let scores = self.reflection_scores(channels, aggregation)?;
        let keep = per_user.min(self.num_reflection());
        self.preselected = scores
            .iter()
            .map(|row| {
                let mut idx: Vec<usize> = (0..row.len()).collect();
                // descending score, ties towards the lower index
                idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                idx.truncate(keep);
                idx
            })
            .collect();
        let mut words: Vec<usize> = Vec::new();
        for rank in 0..keep {
            for list in &self.preselected {
                if !words.contains(&list[rank]) {
                    words.push(list[rank]);
                }
            }
        }
        if let Some(cap) = word_cap {
            words.truncate(cap.max(1));
        }
        words.sort_unstable();
        self.online = words
            .iter()
            .flat_map(|&r| (0..self.wavefront.len()).map(move |phase| OnlineWord { reflection: r, phase }))
            .collect();
        Ok(())
    }

    /// Writes the online words as CSV rows
    /// `online_index,tile,reflection,wavefront,element_y,element_z,phase_rad`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["online_index", "tile", "reflection", "wavefront", "element_y", "element_z", "phase_rad"])?;
        let nz = self.tile_grid.1;
        for (m, word) in self.online.iter().enumerate() {
            for t in 0..self.reflection.len() {
                let phi = self.online_word(t, m);
                for (i, z) in phi.iter().enumerate() {
                    w.write_record([
                        m.to_string(),
                        t.to_string(),
                        word.reflection.to_string(),
                        word.phase.to_string(),
                        (i / nz).to_string(),
                        (i % nz).to_string(),
                        format!("{:.12}", z.arg().rem_euclid(2.0 * PI)),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{synthesize_channels, CMatrix};

    #[test]
    fn single_word_is_broadside_after_cancellation() {
        let words = build_reflection_codebook((4, 4), 1, 0.5, (0.0, 0.0)).unwrap();
        assert_eq!(words.len(), 1);
        assert!(words[0].iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-14));
    }

    #[test]
    fn words_are_unit_modulus() {
        let words = build_reflection_codebook((4, 3), 12, 0.5, (0.4, -0.3)).unwrap();
        assert_eq!(words.len(), 12);
        assert!(words.iter().flatten().all(|z| (z.norm() - 1.0).abs() < 1e-14));
    }

    #[test]
    fn wavefront_grids() {
        assert_eq!(build_wavefront_codebook(1).unwrap(), vec![0.0]);
        let b3 = build_wavefront_codebook(3).unwrap();
        for (got, want) in b3.iter().zip([0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        let b4 = build_wavefront_codebook(4).unwrap();
        for (got, want) in b4.iter().zip([0.0, PI / 2.0, PI, 3.0 * PI / 2.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(build_wavefront_codebook(0).is_err());
    }

    #[test]
    fn factorization_prefers_tile_aspect() {
        assert_eq!(direction_grid(16, (4, 4)), (4, 4));
        assert_eq!(direction_grid(144, (12, 12)), (12, 12));
        assert_eq!(direction_grid(8, (4, 2)), (4, 2));
        assert_eq!(direction_grid(7, (4, 4)).0 * direction_grid(7, (4, 4)).1, 7);
        assert_eq!(direction_grid(1, (3, 3)), (1, 1));
    }

    #[test]
    fn on_grid_user_gets_max_power_from_its_word() {
        let grid = (4, 4);
        let incident = (0.35, -0.2);
        let words = build_reflection_codebook(grid, 16, 0.5, incident).unwrap();
        let dirs = reflection_directions(direction_grid(16, grid));
        let target = 5;
        // pure LoS: F = a_in a_bs^T, physical tile-to-user row a_user^T
        let a_in = steering_vector(grid, 0.5, incident.0, incident.1);
        let a_bs = CVector::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)]);
        let f: CMatrix = &a_in * a_bs.transpose();
        let g = steering_vector(grid, 0.5, dirs[target].0, dirs[target].1).map(|z| z.conj());
        let powers: Vec<f64> = words
            .iter()
            .map(|w| effective_tile_channel(&g, w, &f).unwrap().norm_squared())
            .collect();
        let best = (0..16).max_by(|&a, &b| powers[a].total_cmp(&powers[b])).unwrap();
        assert_eq!(best, target);
        assert!((powers[target] - 2.0 * 256.0).abs() < 1e-9);
    }

    fn small_cfg() -> ScenarioConfig {
        ScenarioConfig {
            num_bs_antennas: 2,
            num_embb: 2,
            num_urllc: 2,
            num_irs: 1,
            tiles_per_irs: 2,
            tile_grid: [4, 4],
            reflection_codebook_size: 16,
            wavefront_codebook_size: 3,
            preselect_per_user: 2,
            ..Default::default()
        }
    }

    #[test]
    fn preselection_bounds_and_argmax() {
        let cfg = small_cfg();
        let ch = synthesize_channels(&cfg, 11).unwrap();
        let mut cb = Codebook::build(&cfg).unwrap();
        cb.preselect(&ch, 2, Aggregation::Sum, None).unwrap();
        assert!(cb.num_online() <= 3 * 4 * 2);
        assert_eq!(cb.num_online() % 3, 0);
        let scores = cb.reflection_scores(&ch, Aggregation::Sum).unwrap();
        for (k, row) in scores.iter().enumerate() {
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
            assert_eq!(cb.preselected[k][0], argmax);
            assert!(cb.online.iter().any(|w| w.reflection == argmax));
        }
        assert!(cb.online.windows(2).all(|w| w[0] < w[1]));
        for t in 0..2 {
            for m in 0..cb.num_online() {
                assert!(cb.online_word(t, m).iter().all(|z| (z.norm() - 1.0).abs() < 1e-13));
            }
        }
    }

    #[test]
    fn no_pruning_keeps_everything() {
        let cfg = small_cfg();
        let ch = synthesize_channels(&cfg, 2).unwrap();
        let mut cb = Codebook::build(&cfg).unwrap();
        cb.preselect(&ch, 16 * 3, Aggregation::Max, None).unwrap();
        assert_eq!(cb.num_online(), 48);
    }

    #[test]
    fn word_cap_keeps_first_ranks() {
        let cfg = small_cfg();
        let ch = synthesize_channels(&cfg, 4).unwrap();
        let mut cb = Codebook::build(&cfg).unwrap();
        cb.preselect(&ch, 2, Aggregation::Sum, Some(1)).unwrap();
        assert_eq!(cb.num_online(), 3);
        assert!(cb.online.iter().all(|w| w.reflection == cb.preselected[0][0]));
    }

    #[test]
    fn csv_export_has_one_row_per_element() {
        let cfg = small_cfg();
        let ch = synthesize_channels(&cfg, 4).unwrap();
        let mut cb = Codebook::build(&cfg).unwrap();
        cb.preselect(&ch, 1, Aggregation::Sum, Some(1)).unwrap();
        let mut buf = Vec::new();
        cb.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 2 * 16);
    }
}
