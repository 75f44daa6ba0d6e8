//! On-disk formats: binary grids, station CSV, model checkpoints, reports.
//!
//! Every writer goes through a temporary file in the destination directory
//! and renames it into place, so readers never see a half-written file.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::denoiser::{DenoiserModel, LayerShape, Params};
use crate::diffusion::{NoiseSchedule, NormStats};
use crate::error::{Error, Result};
use crate::grid::Field2D;
use crate::metrics::EvalReport;
use crate::synth::StationObs;

pub const GRID_MAGIC: [u8; 4] = *b"WSRG";
pub const GRID_VERSION: u16 = 1;
/// magic + version + rows + cols + cell size.
pub const GRID_HEADER_LEN: usize = 4 + 2 + 4 + 4 + 8;

pub const CKPT_MAGIC: [u8; 4] = *b"WSRM";
pub const CKPT_VERSION: u16 = 1;

pub const STATION_HEADER: [&str; 5] = ["id", "row", "col", "height_m", "speed_mps"];

/// Writes `bytes` to `path` via a sibling temp file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn encode_grid(field: &Field2D) -> Result<Vec<u8>> {
    let (rows, cols) = field.shape();
    let to_u32 = |n: usize| {
        u32::try_from(n).map_err(|_| Error::InvalidField(format!("dimension {n} exceeds u32")))
    };
    let mut out = Vec::with_capacity(GRID_HEADER_LEN + 4 * field.len());
    out.extend_from_slice(&GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(rows)?.to_le_bytes());
    out.extend_from_slice(&to_u32(cols)?.to_le_bytes());
    out.extend_from_slice(&field.cell_size_km().to_le_bytes());
    for &v in field.values() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::InvalidField(format!("value {v} does not fit in f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Little cursor over a byte slice that reports truncation precisely.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let mut a = [0u8; N];
        a.copy_from_slice(&self.bytes[self.pos..end]);
        self.pos = end;
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn header(&mut self, magic: [u8; 4], version: u16) -> Result<()> {
        let found = self.take::<4>()?;
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        let v = self.u16()?;
        if v != version {
            return Err(Error::VersionMismatch { found: v, expected: version });
        }
        Ok(())
    }

    fn require(&self, n: usize) -> Result<()> {
        let expected = self.pos.checked_add(n).ok_or_else(|| Error::Malformed("size overflow".into()))?;
        if expected > self.bytes.len() {
            return Err(Error::Truncated {
                expected,
                found: self.bytes.len(),
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_grid(bytes: &[u8]) -> Result<Field2D> {
    let mut r = Reader::new(bytes);
    r.header(GRID_MAGIC, GRID_VERSION)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let cell = r.f64()?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Malformed("grid size overflow".into()))?;
    r.require(4 * n)?;
    let values = (0..n)
        .map(|_| Ok(f32::from_le_bytes(r.take()?) as f64))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Field2D::new(rows, cols, cell, values)
}

pub fn write_grid(field: &Field2D, path: &Path) -> Result<()> {
    write_atomic(path, &encode_grid(field)?)
}

pub fn read_grid(path: &Path) -> Result<Field2D> {
    decode_grid(&fs::read(path)?)
}

/// Parses station rows; the header must match exactly and cells must be unique.
pub fn parse_stations(text: &str) -> Result<Vec<StationObs>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != STATION_HEADER {
        return Err(Error::Malformed(format!(
            "station header {:?}, expected {}",
            header,
            STATION_HEADER.join(",")
        )));
    }
    let mut out: Vec<StationObs> = Vec::new();
    for rec in rdr.deserialize() {
        let s: StationObs = rec?;
        if !(s.speed_mps.is_finite() && s.speed_mps >= 0.0) {
            return Err(Error::InvalidStation(format!("station {} has speed {}", s.id, s.speed_mps)));
        }
        if !(s.height_m.is_finite() && s.height_m > 0.0) {
            return Err(Error::NonPositiveHeight(s.height_m));
        }
        if out.iter().any(|o| o.row == s.row && o.col == s.col) {
            return Err(Error::DuplicateStation { row: s.row, col: s.col });
        }
        out.push(s);
    }
    Ok(out)
}

pub fn read_stations(path: &Path) -> Result<Vec<StationObs>> {
    parse_stations(&fs::read_to_string(path)?)
}

pub fn format_stations(stations: &[StationObs]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(STATION_HEADER)?;
    for s in stations {
        w.write_record([
            s.id.clone(),
            s.row.to_string(),
            s.col.to_string(),
            s.height_m.to_string(),
            s.speed_mps.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Malformed(e.to_string()))
}

pub fn write_stations(stations: &[StationObs], path: &Path) -> Result<()> {
    write_atomic(path, format_stations(stations)?.as_bytes())
}

/// A trained model together with the schedule it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let m = &ckpt.model;
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.steps() as u32).to_le_bytes());
    out.extend_from_slice(&(m.shapes().len() as u32).to_le_bytes());
    for s in m.shapes() {
        for v in [s.in_ch, s.out_ch, s.kernel] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    out.push(m.terrain_conditioning() as u8);
    let n = m.norm();
    for v in [n.wind_mean, n.wind_std, n.terrain_mean, n.terrain_std] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &b in ckpt.schedule.betas() {
        out.extend_from_slice(&b.to_le_bytes());
    }
    for seg in m.params.segments() {
        for &v in seg {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.header(CKPT_MAGIC, CKPT_VERSION)?;
    let steps = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    r.require(12 * n_layers)?;
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        shapes.push(LayerShape {
            in_ch: r.u32()? as usize,
            out_ch: r.u32()? as usize,
            kernel: r.u32()? as usize,
        });
    }
    let terrain_conditioning = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(Error::Malformed(format!("terrain flag {v}"))),
    };
    let norm = NormStats {
        wind_mean: r.f64()?,
        wind_std: r.f64()?,
        terrain_mean: r.f64()?,
        terrain_std: r.f64()?,
    };
    r.require(8 * steps)?;
    let betas = (0..steps).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let schedule = NoiseSchedule::from_betas(betas)?;
    let mut read_vec = |n: usize| -> Result<Vec<f64>> {
        r.require(8 * n)?;
        (0..n).map(|_| r.f64()).collect()
    };
    let mut weights = Vec::with_capacity(n_layers);
    let mut biases = Vec::with_capacity(n_layers);
    for s in &shapes {
        weights.push(read_vec(s.weight_len())?);
        biases.push(read_vec(s.out_ch)?);
    }
    let embed = shapes.first().map_or(0, |s| s.out_ch);
    let time_embedding = read_vec(steps * embed)?;
    r.finish()?;
    let params = Params {
        weights,
        biases,
        time_embedding,
    };
    let model = DenoiserModel::from_parts(shapes, params, steps, norm, terrain_conditioning)?;
    Ok(Checkpoint { model, schedule })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Two-line CSV: header then values. A missing Pearson r is left empty.
pub fn format_report(report: &EvalReport, quantiles: &[(f64, f64, f64)]) -> String {
    let mut header = vec![
        "mae".to_string(),
        "rmse".into(),
        "pearson_r".into(),
        "psnr_db".into(),
        "ssim".into(),
        "n_pixels".into(),
        "data_range".into(),
    ];
    let mut row = vec![
        report.mae.to_string(),
        report.rmse.to_string(),
        report.pearson_r.map(|r| r.to_string()).unwrap_or_default(),
        report.psnr_db.to_string(),
        report.ssim.to_string(),
        report.n_pixels.to_string(),
        report.data_range.to_string(),
    ];
    for (p, pred, truth) in quantiles {
        header.push(format!("pred_q{p}"));
        row.push(pred.to_string());
        header.push(format!("truth_q{p}"));
        row.push(truth.to_string());
    }
    format!("{}\n{}\n", header.join(","), row.join(","))
}

pub fn format_losses(losses: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, l));
    }
    s
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
