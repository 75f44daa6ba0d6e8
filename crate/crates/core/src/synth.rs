//! Seeded synthetic scenes: terrain, a terrain-coupled "truth" wind field, a
//! blurred and biased "simulation" of it, and sparse station samples.
//!
//! Every generator draws from its own ChaCha stream keyed by `(seed, stream)`,
//! so the terrain of a scene does not change when, say, the bias settings do.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Field2D;

const TERRAIN_STREAM: u64 = 1;
const SYNOPTIC_STREAM: u64 = 2;
const BIAS_STREAM: u64 = 3;

/// Correlation length of the synoptic wind component.
pub const SYNOPTIC_LENGTH_SCALE_CELLS: f64 = 16.0;

/// Slope (m/km) at which the terrain speed-up equals `terrain_coupling` times
/// the synoptic amplitude.
pub const REFERENCE_SLOPE_M_PER_KM: f64 = 30.0;

/// Cell size of synthetic grids (km).
pub const CELL_SIZE_KM: f64 = 2.0;

/// Height assigned to sampled stations (m).
pub const STATION_HEIGHT_M: f64 = 80.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub size: usize,
    pub terrain_roughness: f64,
    pub terrain_amplitude_m: f64,
    pub wind_mean_mps: f64,
    pub wind_synoptic_amplitude_mps: f64,
    pub terrain_coupling: f64,
    pub bias_amplitude_mps: f64,
    pub bias_length_scale_cells: f64,
    pub blur_radius_cells: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 128,
            terrain_roughness: 2.0,
            terrain_amplitude_m: 800.0,
            wind_mean_mps: 8.0,
            wind_synoptic_amplitude_mps: 4.0,
            terrain_coupling: 0.4,
            bias_amplitude_mps: 1.5,
            bias_length_scale_cells: 32.0,
            blur_radius_cells: 2,
        }
    }
}

impl SynthConfig {
    /// `sr_factor` is the super-resolution factor the scene must divide into.
    pub fn validate(&self, sr_factor: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.size < 32 {
            return bad(format!("synth.size {} must be at least 32", self.size));
        }
        if sr_factor < 2 || self.size % sr_factor != 0 {
            return bad(format!(
                "synth.size {} must be divisible by the SR factor {sr_factor}",
                self.size
            ));
        }
        for (name, v) in [
            ("terrain_amplitude_m", self.terrain_amplitude_m),
            ("wind_mean_mps", self.wind_mean_mps),
            ("wind_synoptic_amplitude_mps", self.wind_synoptic_amplitude_mps),
            ("bias_amplitude_mps", self.bias_amplitude_mps),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("synth.{name} = {v} must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.terrain_coupling) {
            return bad(format!(
                "synth.terrain_coupling = {} must lie in [0, 1]",
                self.terrain_coupling
            ));
        }
        if !self.terrain_roughness.is_finite() {
            return bad("synth.terrain_roughness must be finite".into());
        }
        if !(self.bias_length_scale_cells.is_finite() && self.bias_length_scale_cells > 0.0) {
            return bad("synth.bias_length_scale_cells must be positive".into());
        }
        Ok(())
    }
}

/// A point observation on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationObs {
    pub id: String,
    pub row: usize,
    pub col: usize,
    pub height_m: f64,
    pub speed_mps: f64,
}

impl StationObs {
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.row >= rows || self.col >= cols {
            return Err(Error::StationOutOfBounds {
                id: self.id.clone(),
                row: self.row,
                col: self.col,
                rows,
                cols,
            });
        }
        if !(self.speed_mps.is_finite() && self.speed_mps >= 0.0) {
            return Err(Error::InvalidStation(format!(
                "station {} has speed {}",
                self.id, self.speed_mps
            )));
        }
        if !(self.height_m.is_finite() && self.height_m > 0.0) {
            return Err(Error::NonPositiveHeight(self.height_m));
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n` standard-normal draws from the `(seed, stream)` generator.
pub fn white_noise(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    let mut rng = rng_for(seed, stream);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Signed integer wavenumber of FFT bin `i` on an `n`-point axis.
fn wavenumber(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Filters a square noise image in the Fourier domain.
///
/// `gain(ky, kx)` receives integer wavenumbers and must be even in both, so
/// the result is real. The inverse transform is normalized by `1/n²`.
fn shape_spectrum(noise: &[f64], n: usize, gain: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex64> = noise.iter().map(|&v| Complex64::new(v, 0.0)).collect();

    let fft2 = |buf: &mut Vec<Complex64>, plan: &std::sync::Arc<dyn rustfft::Fft<f64>>| {
        for row in buf.chunks_exact_mut(n) {
            plan.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..n {
            for r in 0..n {
                col[r] = buf[r * n + c];
            }
            plan.process(&mut col);
            for r in 0..n {
                buf[r * n + c] = col[r];
            }
        }
    };

    fft2(&mut buf, &fwd);
    for r in 0..n {
        let ky = wavenumber(r, n);
        for c in 0..n {
            buf[r * n + c] *= gain(ky, wavenumber(c, n));
        }
    }
    fft2(&mut buf, &inv);
    let norm = 1.0 / (n * n) as f64;
    buf.iter().map(|z| z.re * norm).collect()
}

/// Radial power-law amplitude gain: power spectrum ∝ k^(-exponent), no DC.
pub fn power_law_gain(exponent: f64) -> impl Fn(f64, f64) -> f64 {
    move |ky, kx| {
        let k = (ky * ky + kx * kx).sqrt();
        if k == 0.0 {
            0.0
        } else {
            k.powf(-0.5 * exponent)
        }
    }
}

/// Gaussian low-pass gain for a kernel of std `sigma` cells on an `n` grid.
fn gaussian_gain(sigma: f64, n: usize) -> impl Fn(f64, f64) -> f64 {
    let s = 2.0 * std::f64::consts::PI * sigma / n as f64;
    move |ky, kx| (-0.5 * s * s * (ky * ky + kx * kx)).exp()
}

/// The terrain field before rescaling to `[0, terrain_amplitude_m]`.
pub fn terrain_spectral_field(cfg: &SynthConfig) -> Vec<f64> {
    let n = cfg.size;
    let noise = white_noise(cfg.seed, TERRAIN_STREAM, n * n);
    shape_spectrum(&noise, n, power_law_gain(cfg.terrain_roughness))
}

/// Smooth random field with unit expected per-pixel variance.
///
/// Correlation is Gaussian with kernel std `length_scale / 2`. The patch
/// mean is random, not removed.
fn smooth_random_field(seed: u64, stream: u64, n: usize, length_scale: f64) -> Vec<f64> {
    let noise = white_noise(seed, stream, n * n);
    let gain = gaussian_gain(0.5 * length_scale, n);
    let mut power = 0.0;
    for r in 0..n {
        for c in 0..n {
            let g = gain(wavenumber(r, n), wavenumber(c, n));
            power += g * g;
        }
    }
    let std = (power / (n * n) as f64).sqrt();
    shape_spectrum(&noise, n, gain)
        .into_iter()
        .map(|v| v / std)
        .collect()
}

/// Spectral-synthesis terrain, rescaled to zero minimum and the configured peak.
pub fn gen_terrain(cfg: &SynthConfig) -> Result<Field2D> {
    let n = cfg.size;
    if cfg.terrain_amplitude_m == 0.0 {
        return Field2D::filled(n, n, CELL_SIZE_KM, 0.0);
    }
    let raw = terrain_spectral_field(cfg);
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let values = if span > 0.0 {
        raw.iter()
            .map(|v| (v - lo) / span * cfg.terrain_amplitude_m)
            .collect()
    } else {
        vec![0.0; n * n]
    };
    Field2D::new(n, n, CELL_SIZE_KM, values)
}

/// Terrain slope magnitude (m/km) by centered differences, one-sided at edges.
pub fn gradient_magnitude(terrain: &Field2D) -> Field2D {
    let (rows, cols) = terrain.shape();
    let h = terrain.cell_size_km();
    let diff = |lo: usize, hi: usize, a: f64, b: f64| {
        if hi > lo {
            (b - a) / ((hi - lo) as f64 * h)
        } else {
            0.0
        }
    };
    Field2D::from_fn(rows, cols, h, |r, c| {
        let (r0, r1) = (r.saturating_sub(1), (r + 1).min(rows - 1));
        let (c0, c1) = (c.saturating_sub(1), (c + 1).min(cols - 1));
        let gy = diff(r0, r1, terrain.get(r0, c), terrain.get(r1, c));
        let gx = diff(c0, c1, terrain.get(r, c0), terrain.get(r, c1));
        (gx * gx + gy * gy).sqrt()
    })
    .expect("finite terrain yields finite slopes")
}

/// Terrain-coupled wind: mean + synoptic field + slope speed-up.
///
/// The speed-up is `terrain_coupling · wind_synoptic_amplitude_mps · |∇h| / S`
/// with `S` = [`REFERENCE_SLOPE_M_PER_KM`], so flat terrain adds nothing and
/// the term is a local function of the terrain.
pub fn gen_truth_wind(terrain: &Field2D, cfg: &SynthConfig) -> Result<Field2D> {
    let n = cfg.size;
    if terrain.shape() != (n, n) {
        return Err(Error::ShapeMismatch {
            expected: (n, n),
            found: terrain.shape(),
        });
    }
    let synoptic = smooth_random_field(cfg.seed, SYNOPTIC_STREAM, n, SYNOPTIC_LENGTH_SCALE_CELLS);
    let slope = gradient_magnitude(terrain);
    let gain = cfg.terrain_coupling * cfg.wind_synoptic_amplitude_mps / REFERENCE_SLOPE_M_PER_KM;
    let values = synoptic
        .iter()
        .zip(slope.values())
        .map(|(&s, &g)| {
            let speedup = gain * g;
            (cfg.wind_mean_mps + cfg.wind_synoptic_amplitude_mps * s + speedup).max(0.0)
        })
        .collect();
    terrain.with_values(values)
}

/// Square box mean of half-width `radius`, clipped at the edges.
pub fn box_blur(field: &Field2D, radius: usize) -> Field2D {
    if radius == 0 {
        return field.clone();
    }
    let (rows, cols) = field.shape();
    // Summed-area table for O(1) window sums.
    let mut sat = vec![0.0; (rows + 1) * (cols + 1)];
    for r in 0..rows {
        let mut run = 0.0;
        for c in 0..cols {
            run += field.get(r, c);
            sat[(r + 1) * (cols + 1) + c + 1] = sat[r * (cols + 1) + c + 1] + run;
        }
    }
    Field2D::from_fn(rows, cols, field.cell_size_km(), |r, c| {
        let (r0, r1) = (r.saturating_sub(radius), (r + radius + 1).min(rows));
        let (c0, c1) = (c.saturating_sub(radius), (c + radius + 1).min(cols));
        let w = cols + 1;
        let sum = sat[r1 * w + c1] - sat[r0 * w + c1] - sat[r1 * w + c0] + sat[r0 * w + c0];
        sum / ((r1 - r0) * (c1 - c0)) as f64
    })
    .expect("box mean of finite values is finite")
}

/// Blurred truth plus a smooth additive bias, clamped at zero.
pub fn make_biased_sim(truth: &Field2D, cfg: &SynthConfig) -> Result<Field2D> {
    let blurred = box_blur(truth, cfg.blur_radius_cells);
    if cfg.bias_amplitude_mps == 0.0 {
        return Ok(blurred);
    }
    let (rows, cols) = truth.shape();
    if rows != cols {
        return Err(Error::InvalidField(format!(
            "bias synthesis needs a square grid, got {rows}x{cols}"
        )));
    }
    let bias = smooth_random_field(cfg.seed, BIAS_STREAM, rows, cfg.bias_length_scale_cells);
    blurred.with_values(
        blurred
            .values()
            .iter()
            .zip(&bias)
            .map(|(&v, &b)| (v + cfg.bias_amplitude_mps * b).max(0.0))
            .collect(),
    )
}

/// `k` distinct cells drawn uniformly without replacement, observed from `truth`.
pub fn sample_stations(truth: &Field2D, k: usize, seed: u64) -> Result<Vec<StationObs>> {
    let n = truth.len();
    if k == 0 || k > n {
        return Err(Error::StationCount { k, max: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, n, k)
        .into_iter()
        .enumerate()
        .map(|(i, cell)| {
            let (row, col) = (cell / truth.cols(), cell % truth.cols());
            StationObs {
                id: format!("S{i:03}"),
                row,
                col,
                height_m: STATION_HEIGHT_M,
                speed_mps: truth.get(row, col),
            }
        })
        .collect())
}

/// A generated scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub terrain: Field2D,
    pub truth: Field2D,
    pub sim: Field2D,
}

pub fn gen_scene(cfg: &SynthConfig) -> Result<Scene> {
    let terrain = gen_terrain(cfg)?;
    let truth = gen_truth_wind(&terrain, cfg)?;
    let sim = make_biased_sim(&truth, cfg)?;
    Ok(Scene {
        terrain,
        truth,
        sim,
    })
}
