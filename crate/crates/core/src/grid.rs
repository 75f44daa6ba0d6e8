//! Gridded fields and resampling.
//!
//! Fields are stored row-major with row 0 at the southern edge. Cell `(r, c)`
//! has its center at `((c + 0.5) * cell, (r + 0.5) * cell)` km from the
//! south-west corner. All resampling is cell-center aligned and clamps sample
//! coordinates at the borders.

use crate::error::{Error, Result};

/// A rectangular grid of finite values with a physical cell size.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    rows: usize,
    cols: usize,
    cell_size_km: f64,
    values: Vec<f64>,
}

impl Field2D {
    pub fn new(rows: usize, cols: usize, cell_size_km: f64, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidField(format!("empty {rows}x{cols} grid")));
        }
        if !(cell_size_km.is_finite() && cell_size_km > 0.0) {
            return Err(Error::InvalidField(format!(
                "cell size {cell_size_km} km must be positive"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::InvalidField(format!(
                "{} values for a {rows}x{cols} grid",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidField(format!(
                "non-finite value at index {i}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            cell_size_km,
            values,
        })
    }

    pub fn filled(rows: usize, cols: usize, cell_size_km: f64, value: f64) -> Result<Self> {
        Self::new(rows, cols, cell_size_km, vec![value; rows * cols])
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        cell_size_km: f64,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self::new(rows, cols, cell_size_km, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cell_size_km(&self) -> f64 {
        self.cell_size_km
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Same grid, new values. Values are validated like [`Field2D::new`].
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.rows, self.cols, self.cell_size_km, values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two equally shaped fields.
    pub fn zip_map(&self, other: &Field2D, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        self.with_values(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn ensure_same_shape(&self, other: &Field2D) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
            / self.values.len() as f64;
        var.sqrt()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Bilinear sample at fractional cell indices, clamped to the grid.
    pub fn sample_bilinear(&self, row: f64, col: f64) -> f64 {
        let (r0, r1, wr) = clamp_axis(row, self.rows);
        let (c0, c1, wc) = clamp_axis(col, self.cols);
        let top = self.get(r0, c0) * (1.0 - wc) + self.get(r0, c1) * wc;
        let bottom = self.get(r1, c0) * (1.0 - wc) + self.get(r1, c1) * wc;
        top * (1.0 - wr) + bottom * wr
    }
}

/// Paired high/low resolution training sample with its terrain.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub hr: Field2D,
    pub lr: Field2D,
    pub terrain: Field2D,
}

impl PatchPair {
    pub fn new(hr: Field2D, lr: Field2D, terrain: Field2D) -> Result<Self> {
        hr.ensure_same_shape(&terrain)?;
        let factor = hr.rows() / lr.rows();
        if factor < 2 || hr.rows() != factor * lr.rows() || hr.cols() != factor * lr.cols() {
            return Err(Error::InvalidField(format!(
                "{}x{} high-resolution grid is not an integer multiple (>= 2) of {}x{}",
                hr.rows(),
                hr.cols(),
                lr.rows(),
                lr.cols()
            )));
        }
        Ok(Self { hr, lr, terrain })
    }

    /// Builds a pair by block-averaging `hr`.
    pub fn from_hr(hr: Field2D, terrain: Field2D, factor: usize) -> Result<Self> {
        let lr = coarsen(&hr, factor)?;
        Self::new(hr, lr, terrain)
    }

    pub fn factor(&self) -> usize {
        self.hr.rows() / self.lr.rows()
    }
}

fn clamp_axis(pos: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let p = pos.clamp(0.0, max);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, p - i0 as f64)
}

fn check_factor(factor: usize) -> Result<()> {
    if factor < 2 {
        return Err(Error::InvalidFactor(factor));
    }
    Ok(())
}

/// Block-mean coarsening by an integer factor.
pub fn coarsen(field: &Field2D, factor: usize) -> Result<Field2D> {
    check_factor(factor)?;
    for dim in [field.rows, field.cols] {
        if dim % factor != 0 {
            return Err(Error::NotDivisible { dim, factor });
        }
    }
    let (rows, cols) = (field.rows / factor, field.cols / factor);
    let mut out = vec![0.0; rows * cols];
    for r in 0..field.rows {
        let dst = &mut out[(r / factor) * cols..(r / factor + 1) * cols];
        for (c, v) in field.values[r * field.cols..(r + 1) * field.cols]
            .iter()
            .enumerate()
        {
            dst[c / factor] += v;
        }
    }
    let norm = 1.0 / (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v *= norm);
    Field2D::new(rows, cols, field.cell_size_km * factor as f64, out)
}

/// Cell-center aligned bilinear upsampling by an integer factor.
pub fn upsample_bilinear(field: &Field2D, factor: usize) -> Result<Field2D> {
    check_factor(factor)?;
    let k = factor as f64;
    Field2D::from_fn(
        field.rows * factor,
        field.cols * factor,
        field.cell_size_km / k,
        |r, c| field.sample_bilinear((r as f64 + 0.5) / k - 0.5, (c as f64 + 0.5) / k - 0.5),
    )
}

/// Keys cubic convolution kernel with a = -0.5.
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Cell-center aligned bicubic (Keys) upsampling with replicated borders.
///
/// Unlike the bilinear path the output can overshoot the input range.
pub fn upsample_bicubic(field: &Field2D, factor: usize) -> Result<Field2D> {
    check_factor(factor)?;
    let k = factor as f64;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    Field2D::from_fn(
        field.rows * factor,
        field.cols * factor,
        field.cell_size_km / k,
        |r, c| {
            let y = (r as f64 + 0.5) / k - 0.5;
            let x = (c as f64 + 0.5) / k - 0.5;
            let (y0, x0) = (y.floor(), x.floor());
            let mut acc = 0.0;
            for dy in -1..=2isize {
                let wy = cubic_weight(y - (y0 + dy as f64));
                let rr = clamp(y0 as isize + dy, field.rows);
                for dx in -1..=2isize {
                    let wx = cubic_weight(x - (x0 + dx as f64));
                    let cc = clamp(x0 as isize + dx, field.cols);
                    acc += wy * wx * field.get(rr, cc);
                }
            }
            acc
        },
    )
}

/// Bilinear resampling onto another grid sharing the south-west origin.
///
/// Destination cells beyond the source extent take clamped border values.
pub fn regrid(src: &Field2D, dst_rows: usize, dst_cols: usize, dst_cell_km: f64) -> Result<Field2D> {
    if dst_rows == 0 || dst_cols == 0 {
        return Err(Error::InvalidField(format!(
            "destination grid {dst_rows}x{dst_cols} is empty"
        )));
    }
    if !(dst_cell_km.is_finite() && dst_cell_km > 0.0) {
        return Err(Error::InvalidField(format!(
            "destination cell size {dst_cell_km} km must be positive"
        )));
    }
    let scale = dst_cell_km / src.cell_size_km;
    Field2D::from_fn(dst_rows, dst_cols, dst_cell_km, |r, c| {
        src.sample_bilinear(
            (r as f64 + 0.5) * scale - 0.5,
            (c as f64 + 0.5) * scale - 0.5,
        )
    })
}

/// All full `patch`x`patch` windows at the given stride, row-major order.
pub fn extract_patches(field: &Field2D, patch: usize, stride: usize) -> Result<Vec<Field2D>> {
    if patch == 0 || stride == 0 {
        return Err(Error::InvalidConfig(format!(
            "patch {patch} and stride {stride} must be positive"
        )));
    }
    if patch > field.rows.min(field.cols) {
        return Err(Error::PatchTooLarge {
            patch,
            rows: field.rows,
            cols: field.cols,
        });
    }
    let mut out = Vec::new();
    for r0 in (0..=field.rows - patch).step_by(stride) {
        for c0 in (0..=field.cols - patch).step_by(stride) {
            let mut values = Vec::with_capacity(patch * patch);
            for r in r0..r0 + patch {
                values.extend_from_slice(&field.values[r * field.cols + c0..r * field.cols + c0 + patch]);
            }
            out.push(Field2D::new(patch, patch, field.cell_size_km, values)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(rows: usize, cols: usize, seed: u64) -> Field2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field2D::from_fn(rows, cols, 2.0, |_, _| rng.random::<f64>()).unwrap()
    }

    fn naive_bilinear(f: &Field2D, y: f64, x: f64) -> f64 {
        let y = y.max(0.0).min((f.rows() - 1) as f64);
        let x = x.max(0.0).min((f.cols() - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(f.rows() - 1), (x0 + 1).min(f.cols() - 1));
        let (ty, tx) = (y - y0 as f64, x - x0 as f64);
        f.get(y0, x0) * (1.0 - ty) * (1.0 - tx)
            + f.get(y0, x1) * (1.0 - ty) * tx
            + f.get(y1, x0) * ty * (1.0 - tx)
            + f.get(y1, x1) * ty * tx
    }

    #[test]
    fn rejects_invalid_fields() {
        assert!(Field2D::new(2, 2, 1.0, vec![0.0; 3]).is_err());
        assert!(Field2D::new(1, 1, 0.0, vec![0.0]).is_err());
        assert!(Field2D::new(1, 1, 1.0, vec![f64::NAN]).is_err());
        assert!(Field2D::new(0, 1, 1.0, vec![]).is_err());
    }

    #[test]
    fn coarsen_constant_and_block() {
        let f = Field2D::filled(8, 8, 2.0, 3.5).unwrap();
        let c = coarsen(&f, 4).unwrap();
        assert_eq!(c.shape(), (2, 2));
        assert_eq!(c.cell_size_km(), 8.0);
        assert!(c.values().iter().all(|&v| v == 3.5));

        let f = Field2D::new(2, 2, 1.0, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(coarsen(&f, 2).unwrap().values(), &[2.5]);
    }

    #[test]
    fn coarsen_errors() {
        let f = Field2D::filled(6, 6, 1.0, 0.0).unwrap();
        assert!(matches!(coarsen(&f, 4), Err(Error::NotDivisible { dim: 6, factor: 4 })));
        assert!(matches!(coarsen(&f, 1), Err(Error::InvalidFactor(1))));
    }

    #[test]
    fn coarsen_matches_block_average_oracle() {
        let f = random_field(128, 128, 42);
        let c = coarsen(&f, 8).unwrap();
        for br in 0..16 {
            for bc in 0..16 {
                let mut s = 0.0;
                for r in br * 8..br * 8 + 8 {
                    for cc in bc * 8..bc * 8 + 8 {
                        s += f.get(r, cc);
                    }
                }
                assert!((c.get(br, bc) - s / 64.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_constant_and_ramp() {
        let f = Field2D::filled(3, 5, 4.0, 7.25).unwrap();
        let u = upsample_bilinear(&f, 3).unwrap();
        assert_eq!(u.shape(), (9, 15));
        assert!(u.values().iter().all(|&v| (v - 7.25).abs() < 1e-15));

        let ramp = Field2D::new(2, 2, 1.0, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let u = upsample_bilinear(&ramp, 2).unwrap();
        for r in 0..4 {
            let row: Vec<f64> = (0..4).map(|c| u.get(r, c)).collect();
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(row[0], 0.0);
            assert_eq!(row[3], 1.0);
        }
        assert!(matches!(upsample_bilinear(&ramp, 1), Err(Error::InvalidFactor(1))));
    }

    #[test]
    fn upsample_matches_naive_oracle() {
        let f = random_field(4, 4, 9);
        let u = upsample_bilinear(&f, 4).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let y = (r as f64 + 0.5) / 4.0 - 0.5;
                let x = (c as f64 + 0.5) / 4.0 - 0.5;
                assert!((u.get(r, c) - naive_bilinear(&f, y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coarsen_inverts_upsample_on_linear_interior() {
        let f = Field2D::from_fn(6, 6, 1.0, |r, c| 0.3 * r as f64 - 1.7 * c as f64 + 2.0).unwrap();
        let back = coarsen(&upsample_bilinear(&f, 4).unwrap(), 4).unwrap();
        for r in 1..5 {
            for c in 1..5 {
                assert!((back.get(r, c) - f.get(r, c)).abs() < 1e-12);
            }
        }
        // Gently curved field: round trip good to 1e-6 everywhere.
        let g = Field2D::from_fn(8, 8, 1.0, |r, c| {
            5.0 + 1e-7 * ((r as f64 * 0.4).sin() + (c as f64 * 0.3).cos())
        })
        .unwrap();
        let back = coarsen(&upsample_bilinear(&g, 2).unwrap(), 2).unwrap();
        for (a, b) in back.values().iter().zip(g.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bicubic_reproduces_constants_and_samples() {
        let f = Field2D::filled(4, 4, 1.0, 2.0).unwrap();
        let u = upsample_bicubic(&f, 4).unwrap();
        assert!(u.values().iter().all(|v| (v - 2.0).abs() < 1e-12));
        // A linear ramp in the interior is reproduced exactly by Keys' kernel.
        let ramp = Field2D::from_fn(8, 8, 1.0, |_, c| c as f64).unwrap();
        let u = upsample_bicubic(&ramp, 2).unwrap();
        for c in 4..12 {
            let x = (c as f64 + 0.5) / 2.0 - 0.5;
            assert!((u.get(8, c) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn regrid_identity_and_constant() {
        let f = random_field(10, 7, 3);
        let g = regrid(&f, 10, 7, 2.0).unwrap();
        assert_eq!(g, f);
        let c = Field2D::filled(5, 5, 3.0, 1.5).unwrap();
        let g = regrid(&c, 11, 4, 1.3).unwrap();
        assert!(g.values().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn regrid_three_km_to_two_km_matches_oracle() {
        let src = Field2D::from_fn(86, 86, 3.0, {
            let mut rng = ChaCha8Rng::seed_from_u64(86);
            move |_, _| rng.random_range(0.0..15.0)
        })
        .unwrap();
        let dst = regrid(&src, 128, 128, 2.0).unwrap();
        for r in 0..128 {
            for c in 0..128 {
                let y = ((r as f64 + 0.5) * 2.0) / 3.0 - 0.5;
                let x = ((c as f64 + 0.5) * 2.0) / 3.0 - 0.5;
                assert!((dst.get(r, c) - naive_bilinear(&src, y, x)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn patch_counts_and_contents() {
        let f = random_field(128, 128, 1);
        let p = extract_patches(&f, 128, 128).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0], f);

        let f = random_field(256, 256, 2);
        assert_eq!(extract_patches(&f, 128, 128).unwrap().len(), 4);

        let f = random_field(130, 130, 3);
        let p = extract_patches(&f, 128, 1).unwrap();
        assert_eq!(p.len(), 9);
        for (i, patch) in p.iter().enumerate() {
            let (r0, c0) = (i / 3, i % 3);
            for r in 0..128 {
                for c in 0..128 {
                    assert_eq!(patch.get(r, c), f.get(r0 + r, c0 + c));
                }
            }
        }
        assert!(matches!(
            extract_patches(&f, 131, 1),
            Err(Error::PatchTooLarge { .. })
        ));
    }

    #[test]
    fn patch_pair_checks_shapes() {
        let hr = Field2D::filled(8, 8, 1.0, 1.0).unwrap();
        let terrain = Field2D::filled(8, 8, 1.0, 0.0).unwrap();
        let pair = PatchPair::from_hr(hr.clone(), terrain.clone(), 4).unwrap();
        assert_eq!(pair.factor(), 4);
        let bad_lr = Field2D::filled(3, 3, 1.0, 1.0).unwrap();
        assert!(PatchPair::new(hr, bad_lr, terrain).is_err());
    }

    proptest! {
        #[test]
        fn coarsen_preserves_mean(seed in any::<u64>(), blocks in 1usize..6, factor in 2usize..5) {
            let f = random_field(blocks * factor, (blocks + 1) * factor, seed);
            let c = coarsen(&f, factor).unwrap();
            prop_assert!((c.mean() - f.mean()).abs() < 1e-12);
        }

        #[test]
        fn upsample_stays_within_input_range(seed in any::<u64>(), factor in 2usize..6) {
            let f = random_field(5, 4, seed);
            let u = upsample_bilinear(&f, factor).unwrap();
            prop_assert!(u.min() >= f.min() - 1e-12);
            prop_assert!(u.max() <= f.max() + 1e-12);
        }
    }
}
