//! Station assimilation: observations are interpolated onto the conditioning
//! grid, each station gets an impact radius from local terrain and wind
//! variability, and a truncated Gaussian mask blends observations into the
//! upsampled simulation before sampling.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, Conditioning, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grid::{upsample_bilinear, Field2D};
use crate::synth::StationObs;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadiusConfig {
    pub min_radius: usize,
    pub max_radius: usize,
    /// Terrain standard-deviation threshold, m.
    pub t1_terrain_std_m: f64,
    /// Wind standard-deviation threshold, m/s.
    pub t2_wind_std_mps: f64,
    pub kernel_sigma_fraction: f64,
}

impl Default for RadiusConfig {
    fn default() -> Self {
        Self {
            min_radius: 1,
            max_radius: 6,
            t1_terrain_std_m: 50.0,
            t2_wind_std_mps: 1.0,
            kernel_sigma_fraction: 0.5,
        }
    }
}

impl RadiusConfig {
    /// A constant radius `r` for every station.
    pub fn fixed(r: usize) -> Self {
        Self {
            min_radius: r,
            max_radius: r,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.min_radius && self.min_radius <= self.max_radius) {
            return Err(Error::InvalidConfig(format!(
                "radius bounds must satisfy 1 <= min_radius ({}) <= max_radius ({})",
                self.min_radius, self.max_radius
            )));
        }
        for (name, v) in [
            ("t1_terrain_std_m", self.t1_terrain_std_m),
            ("t2_wind_std_mps", self.t2_wind_std_mps),
            ("kernel_sigma_fraction", self.kernel_sigma_fraction),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("assimilation.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub weights: Field2D,
}

/// Checks bounds and rejects two stations on one cell.
pub fn validate_stations(stations: &[StationObs], rows: usize, cols: usize) -> Result<()> {
    let mut seen = HashSet::with_capacity(stations.len());
    for s in stations {
        s.validate(rows, cols)?;
        if !seen.insert((s.row, s.col)) {
            return Err(Error::DuplicateStation { row: s.row, col: s.col });
        }
    }
    Ok(())
}

fn dist2(r0: usize, c0: usize, r1: usize, c1: usize) -> f64 {
    let dr = r0 as f64 - r1 as f64;
    let dc = c0 as f64 - c1 as f64;
    dr * dr + dc * dc
}

/// Inverse-distance weighting with power 2, exact at station cells.
pub fn interpolate_observations(
    stations: &[StationObs],
    rows: usize,
    cols: usize,
    cell_size_km: f64,
) -> Result<Field2D> {
    if stations.is_empty() {
        return Err(Error::NoStations);
    }
    validate_stations(stations, rows, cols)?;
    if let [only] = stations {
        return Field2D::filled(rows, cols, cell_size_km, only.speed_mps);
    }
    Field2D::from_fn(rows, cols, cell_size_km, |r, c| {
        let mut num = 0.0;
        let mut den = 0.0;
        for s in stations {
            let d2 = dist2(r, c, s.row, s.col);
            if d2 == 0.0 {
                return s.speed_mps;
            }
            num += s.speed_mps / d2;
            den += 1.0 / d2;
        }
        num / den
    })
}

/// Cells of the disc `(x - px)^2 + (y - py)^2 <= r^2`, clipped to the grid.
fn disc(row: usize, col: usize, r: usize, rows: usize, cols: usize) -> impl Iterator<Item = (usize, usize)> {
    let r2 = (r * r) as f64;
    let r0 = row.saturating_sub(r);
    let r1 = (row + r).min(rows - 1);
    let c0 = col.saturating_sub(r);
    let c1 = (col + r).min(cols - 1);
    (r0..=r1).flat_map(move |y| (c0..=c1).map(move |x| (y, x))).filter(move |&(y, x)| dist2(y, x, row, col) <= r2)
}

fn population_std(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Grows the radius from `min_radius` one cell at a time while the disc's
/// terrain and wind spreads both stay under their thresholds.
pub fn dynamic_impact_radius(
    row: usize,
    col: usize,
    terrain: &Field2D,
    sim_wind: &Field2D,
    cfg: &RadiusConfig,
) -> Result<usize> {
    cfg.validate()?;
    terrain.ensure_same_shape(sim_wind)?;
    let (rows, cols) = terrain.shape();
    if row >= rows || col >= cols {
        return Err(Error::StationOutOfBounds {
            id: String::new(),
            row,
            col,
            rows,
            cols,
        });
    }
    let mut r = cfg.min_radius;
    while r < cfg.max_radius {
        let cells: Vec<(usize, usize)> = disc(row, col, r, rows, cols).collect();
        let sigma_h = population_std(cells.iter().map(|&(y, x)| terrain.get(y, x)));
        let sigma_s = population_std(cells.iter().map(|&(y, x)| sim_wind.get(y, x)));
        if sigma_h < cfg.t1_terrain_std_m && sigma_s < cfg.t2_wind_std_mps {
            r += 1;
        } else {
            break;
        }
    }
    Ok(r)
}

/// Truncated Gaussian kernels, 1 at each station, combined by maximum.
pub fn build_soft_mask(
    stations: &[StationObs],
    radii: &[usize],
    rows: usize,
    cols: usize,
    cell_size_km: f64,
    cfg: &RadiusConfig,
) -> Result<SoftMask> {
    cfg.validate()?;
    if radii.len() != stations.len() {
        return Err(Error::InvalidConfig(format!(
            "{} radii for {} stations",
            radii.len(),
            stations.len()
        )));
    }
    validate_stations(stations, rows, cols)?;
    if let Some(r) = radii.iter().find(|r| !(cfg.min_radius..=cfg.max_radius).contains(r)) {
        return Err(Error::InvalidConfig(format!(
            "radius {r} outside {}..={}",
            cfg.min_radius, cfg.max_radius
        )));
    }
    let mut w: Vec<f64> = vec![0.0; rows * cols];
    for (s, &r) in stations.iter().zip(radii) {
        let sigma = cfg.kernel_sigma_fraction * r as f64;
        for (y, x) in disc(s.row, s.col, r, rows, cols) {
            let d2 = dist2(y, x, s.row, s.col);
            let k = if d2 == 0.0 { 1.0 } else { (-d2 / (2.0 * sigma * sigma)).exp() };
            let cell = &mut w[y * cols + x];
            *cell = cell.max(k).clamp(0.0, 1.0);
        }
    }
    Ok(SoftMask {
        weights: Field2D::new(rows, cols, cell_size_km, w)?,
    })
}

/// `m·obs + (1 − m)·sim`, pixelwise.
pub fn blend(obs: &Field2D, sim: &Field2D, mask: &SoftMask) -> Result<Field2D> {
    obs.ensure_same_shape(sim)?;
    obs.ensure_same_shape(&mask.weights)?;
    let values = obs
        .values()
        .iter()
        .zip(sim.values())
        .zip(mask.weights.values())
        .map(|((&o, &s), &m)| {
            if m == 1.0 {
                o
            } else if m == 0.0 {
                s
            } else {
                m * o + (1.0 - m) * s
            }
        })
        .collect();
    sim.with_values(values)
}

/// Everything the blending stage produced, in physical units.
#[derive(Debug, Clone)]
pub struct Composite {
    pub field: Field2D,
    pub mask: SoftMask,
    pub radii: Vec<usize>,
}

/// Blends stations into an already upsampled simulation field.
pub fn composite_conditioning(
    sim_up: &Field2D,
    terrain: &Field2D,
    stations: &[StationObs],
    cfg: &RadiusConfig,
) -> Result<Composite> {
    cfg.validate()?;
    sim_up.ensure_same_shape(terrain)?;
    let (rows, cols) = sim_up.shape();
    if stations.is_empty() {
        return Ok(Composite {
            field: sim_up.clone(),
            mask: SoftMask {
                weights: sim_up.map(|_| 0.0)?,
            },
            radii: Vec::new(),
        });
    }
    let obs = interpolate_observations(stations, rows, cols, sim_up.cell_size_km())?;
    let radii = stations
        .iter()
        .map(|s| dynamic_impact_radius(s.row, s.col, terrain, sim_up, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mask = build_soft_mask(stations, &radii, rows, cols, sim_up.cell_size_km(), cfg)?;
    Ok(Composite {
        field: blend(&obs, sim_up, &mask)?,
        mask,
        radii,
    })
}

fn sr_factor(lr: &Field2D, terrain: &Field2D) -> Result<usize> {
    let (hr, hc) = terrain.shape();
    let (lr_r, lr_c) = lr.shape();
    if hr % lr_r != 0 || hc % lr_c != 0 || hr / lr_r != hc / lr_c {
        return Err(Error::ShapeMismatch {
            expected: (hr, hc),
            found: (lr_r, lr_c),
        });
    }
    let k = hr / lr_r;
    if k < 2 {
        return Err(Error::InvalidFactor(k));
    }
    Ok(k)
}

/// Plain conditional super-resolution of `lr` onto the terrain grid.
pub fn downscale<M: NoisePredictor + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    lr: &Field2D,
    terrain: &Field2D,
    seed: u64,
) -> Result<Field2D> {
    let up = upsample_bilinear(lr, sr_factor(lr, terrain)?)?;
    let cond = Conditioning::from_physical(&up, terrain, &model.norm_stats())?;
    sample(model, &cond, sched, seed)
}

/// Super-resolution conditioned on the station-blended composite.
///
/// Station coordinates index the HR grid; speeds are taken as given, so lift
/// them to the field's height first.
pub fn assimilated_downscale<M: NoisePredictor + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    lr_sim: &Field2D,
    terrain: &Field2D,
    stations: &[StationObs],
    cfg: &RadiusConfig,
    seed: u64,
) -> Result<Field2D> {
    let up = upsample_bilinear(lr_sim, sr_factor(lr_sim, terrain)?)?;
    let comp = composite_conditioning(&up, terrain, stations, cfg)?;
    let cond = Conditioning::from_physical(&comp.field, terrain, &model.norm_stats())?;
    sample(model, &cond, sched, seed)
}
