//! Error and similarity metrics between predicted and reference fields.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Field2D;

/// SSIM window size and Gaussian std.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Summary of a prediction against a reference.
///
/// `psnr_db` is `f64::INFINITY` when the inputs are identical; `pearson_r`
/// is `None` when either input is constant over the evaluated pixels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub pearson_r: Option<f64>,
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_pixels: usize,
    pub data_range: f64,
}

fn masked_pairs<'a>(
    a: &'a Field2D,
    b: &'a Field2D,
    mask: Option<&'a [(usize, usize)]>,
) -> Result<Vec<(f64, f64)>> {
    a.ensure_same_shape(b)?;
    match mask {
        None => Ok(a.values().iter().copied().zip(b.values().iter().copied()).collect()),
        Some(cells) => {
            if cells.is_empty() {
                return Err(Error::EmptyMask);
            }
            cells
                .iter()
                .map(|&(r, c)| {
                    if r >= a.rows() || c >= a.cols() {
                        Err(Error::InvalidField(format!(
                            "mask cell ({r}, {c}) outside {}x{} grid",
                            a.rows(),
                            a.cols()
                        )))
                    } else {
                        Ok((a.get(r, c), b.get(r, c)))
                    }
                })
                .collect()
        }
    }
}

/// Mean absolute and root-mean-square difference, optionally over a cell subset.
pub fn mae_rmse(a: &Field2D, b: &Field2D, mask: Option<&[(usize, usize)]>) -> Result<(f64, f64)> {
    let pairs = masked_pairs(a, b, mask)?;
    let n = pairs.len() as f64;
    let (abs, sq) = pairs.iter().fold((0.0, 0.0), |(abs, sq), (x, y)| {
        let d = x - y;
        (abs + d.abs(), sq + d * d)
    });
    Ok((abs / n, (sq / n).sqrt()))
}

fn pearson_pairs(pairs: &[(f64, f64)]) -> Result<f64> {
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Sample Pearson correlation. Constant inputs are an error, not NaN.
pub fn pearson(a: &Field2D, b: &Field2D) -> Result<f64> {
    pearson_pairs(&masked_pairs(a, b, None)?)
}

fn check_range(data_range: f64) -> Result<()> {
    if !(data_range.is_finite() && data_range > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "data range {data_range} must be positive"
        )));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * data_range.log10() - 10.0 * mse.log10()
    }
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical inputs.
pub fn psnr(a: &Field2D, b: &Field2D, data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    let (_, rmse) = mae_rmse(a, b, None)?;
    Ok(psnr_from_mse(rmse * rmse, data_range))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *wi = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode Gaussian filter.
fn filter_valid(values: &[f64], rows: usize, cols: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let (orows, ocols) = (rows - k + 1, cols - k + 1);
    let mut horiz = vec![0.0; rows * ocols];
    for r in 0..rows {
        let src = &values[r * cols..(r + 1) * cols];
        for c in 0..ocols {
            horiz[r * ocols + c] = w.iter().zip(&src[c..c + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; orows * ocols];
    for r in 0..orows {
        for (i, wi) in w.iter().enumerate() {
            let src = &horiz[(r + i) * ocols..(r + i + 1) * ocols];
            for (o, s) in out[r * ocols..(r + 1) * ocols].iter_mut().zip(src) {
                *o += wi * s;
            }
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (σ = 1.5).
///
/// Local statistics are taken only where the window fits inside the field.
pub fn ssim(a: &Field2D, b: &Field2D, data_range: f64) -> Result<f64> {
    a.ensure_same_shape(b)?;
    check_range(data_range)?;
    let (rows, cols) = a.shape();
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(Error::FieldTooSmall {
            rows,
            cols,
            window: SSIM_WINDOW,
        });
    }
    if a.values() == b.values() {
        return Ok(1.0);
    }
    let w = gaussian_window();
    let (x, y) = (a.values(), b.values());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(x, rows, cols, &w);
    let my = filter_valid(y, rows, cols, &w);
    let sxx = filter_valid(&xx, rows, cols, &w);
    let syy = filter_valid(&yy, rows, cols, &w);
    let sxy = filter_valid(&xy, rows, cols, &w);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
            / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Empirical quantiles, linear between order statistics (position `p·(n-1)`).
pub fn cdf_quantiles(field: &Field2D, probs: &[f64]) -> Result<Vec<f64>> {
    if field.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = field.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = (sorted.len() - 1) as f64;
    probs
        .iter()
        .map(|&p| {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("probability {p} outside [0, 1]")));
            }
            let h = p * last;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
        })
        .collect()
}

/// Full report of `pred` against `truth`.
///
/// With a mask, MAE/RMSE/Pearson/PSNR use the masked cells only; SSIM is
/// always computed on the whole field since it needs spatial windows.
pub fn evaluate(
    pred: &Field2D,
    truth: &Field2D,
    mask: Option<&[(usize, usize)]>,
    data_range: f64,
) -> Result<EvalReport> {
    check_range(data_range)?;
    let pairs = masked_pairs(pred, truth, mask)?;
    let (mae, rmse) = mae_rmse(pred, truth, mask)?;
    let pearson_r = pearson_pairs(&pairs).ok();
    Ok(EvalReport {
        mae,
        rmse,
        pearson_r,
        psnr_db: psnr_from_mse(rmse * rmse, data_range),
        ssim: ssim(pred, truth, data_range)?,
        n_pixels: pairs.len(),
        data_range,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(rows: usize, cols: usize, seed: u64) -> Field2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field2D::from_fn(rows, cols, 1.0, |_, _| rng.random_range(0.0..10.0)).unwrap()
    }

    /// Window-by-window SSIM straight from the definition.
    pub(crate) fn ssim_reference(a: &Field2D, b: &Field2D, l: f64) -> f64 {
        let k = SSIM_WINDOW;
        let half = (k / 2) as f64;
        let mut w = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let (di, dj) = (i as f64 - half, j as f64 - half);
                w[i * k + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            }
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for r0 in 0..=a.rows() - k {
            for c0 in 0..=a.cols() - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        mx += w[i * k + j] * a.get(r0 + i, c0 + j);
                        my += w[i * k + j] * b.get(r0 + i, c0 + j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let dx = a.get(r0 + i, c0 + j) - mx;
                        let dy = b.get(r0 + i, c0 + j) - my;
                        vx += w[i * k + j] * dx * dx;
                        vy += w[i * k + j] * dy * dy;
                        cxy += w[i * k + j] * dx * dy;
                    }
                }
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2)
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn mae_rmse_basics() {
        let a = field(8, 8, 1);
        assert_eq!(mae_rmse(&a, &a, None).unwrap(), (0.0, 0.0));
        let b = a.map(|v| v - 1.25).unwrap();
        let (mae, rmse) = mae_rmse(&a, &b, None).unwrap();
        assert!((mae - 1.25).abs() < 1e-12 && (rmse - 1.25).abs() < 1e-12);
        assert!(matches!(mae_rmse(&a, &b, Some(&[])), Err(Error::EmptyMask)));
        let c = field(8, 9, 1);
        assert!(matches!(mae_rmse(&a, &c, None), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn mae_rmse_matches_loop_oracle() {
        let (a, b) = (field(64, 64, 2), field(64, 64, 3));
        let (mut s1, mut s2) = (0.0, 0.0);
        for r in 0..64 {
            for c in 0..64 {
                let d = a.get(r, c) - b.get(r, c);
                s1 += d.abs();
                s2 += d * d;
            }
        }
        let (mae, rmse) = mae_rmse(&a, &b, None).unwrap();
        assert!((mae - s1 / 4096.0).abs() < 1e-12);
        assert!((rmse - (s2 / 4096.0).sqrt()).abs() < 1e-12);

        let mask = [(0, 0), (5, 7), (63, 63)];
        let (mae, _) = mae_rmse(&a, &b, Some(&mask)).unwrap();
        let direct = mask.iter().map(|&(r, c)| (a.get(r, c) - b.get(r, c)).abs()).sum::<f64>() / 3.0;
        assert!((mae - direct).abs() < 1e-12);
    }

    #[test]
    fn pearson_extremes() {
        let a = field(16, 16, 4);
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map(|v| 3.0 - v).unwrap();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let flat = Field2D::filled(16, 16, 1.0, 2.0).unwrap();
        assert!(matches!(pearson(&a, &flat), Err(Error::ZeroVariance)));
    }

    #[test]
    fn psnr_values() {
        let a = field(8, 8, 5);
        assert_eq!(psnr(&a, &a, 10.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 1.0).unwrap();
        assert!((psnr(&a, &b, 10.0).unwrap() - 20.0).abs() < 1e-12);
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = field(16, 16, 6);
        assert_eq!(ssim(&a, &a, 10.0).unwrap(), 1.0);

        let l = 10.0;
        let ca = Field2D::filled(16, 16, 1.0, 3.0).unwrap();
        let cb = Field2D::filled(16, 16, 1.0, 13.0).unwrap();
        let expected = ssim_reference(&ca, &cb, l);
        // Closed form for constants: luminance term only.
        let c1 = (0.01 * l) * (0.01 * l);
        let closed = (2.0 * 3.0 * 13.0 + c1) / (9.0 + 169.0 + c1);
        assert!((expected - closed).abs() < 1e-12);
        assert!((ssim(&ca, &cb, l).unwrap() - expected).abs() < 1e-12);

        let small = field(10, 16, 1);
        assert!(matches!(
            ssim(&small, &small, 1.0),
            Err(Error::FieldTooSmall { .. })
        ));
    }

    #[test]
    fn ssim_matches_reference_on_seeded_pairs() {
        let a = field(64, 64, 7);
        let b = a.zip_map(&field(64, 64, 8), |x, y| 0.7 * x + 0.3 * y).unwrap();
        let l = a.max() - a.min();
        assert!((ssim(&a, &b, l).unwrap() - ssim_reference(&a, &b, l)).abs() < 1e-8);
    }

    #[test]
    fn quantiles() {
        let f = field(10, 10, 9);
        let q = cdf_quantiles(&f, &[0.0, 1.0]).unwrap();
        assert_eq!(q, vec![f.min(), f.max()]);

        let perm = Field2D::new(10, 10, 1.0, (1..=100).rev().map(|v| v as f64).collect()).unwrap();
        assert_eq!(cdf_quantiles(&perm, &[0.5]).unwrap(), vec![50.5]);

        let probs: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
        let q = cdf_quantiles(&f, &probs).unwrap();
        let mut sorted = f.values().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (p, got) in probs.iter().zip(&q) {
            let h = p * 99.0;
            let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
            let want = sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]);
            assert_eq!(*got, want);
        }
        assert!(cdf_quantiles(&f, &[1.5]).is_err());
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let a = field(32, 32, 10);
        let noise = field(32, 32, 11).map(|v| v / 10.0 - 0.5).unwrap();
        let values: Vec<f64> = [0.1, 0.2, 0.4, 0.8, 1.6]
            .iter()
            .map(|&amp| {
                let b = a.zip_map(&noise, |x, n| x + amp * n).unwrap();
                psnr(&a, &b, 10.0).unwrap()
            })
            .collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn report_with_mask() {
        let a = field(16, 16, 12);
        let rep = evaluate(&a, &a, None, 10.0).unwrap();
        assert_eq!(rep.mae, 0.0);
        assert_eq!(rep.ssim, 1.0);
        assert_eq!(rep.psnr_db, f64::INFINITY);
        let b = field(16, 16, 13);
        let rep = evaluate(&a, &b, Some(&[(1, 1), (2, 3)]), 10.0).unwrap();
        assert_eq!(rep.n_pixels, 2);
        assert!(rep.rmse >= rep.mae);
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(seed in any::<u64>()) {
            let (a, b) = (field(12, 12, seed), field(12, 12, seed ^ 0xabc));
            let (mae, rmse) = mae_rmse(&a, &b, None).unwrap();
            prop_assert!(rmse >= mae - 1e-12);
        }

        #[test]
        fn ssim_is_symmetric(seed in any::<u64>()) {
            let (a, b) = (field(16, 16, seed), field(16, 16, seed.wrapping_add(1)));
            let d = ssim(&a, &b, 10.0).unwrap() - ssim(&b, &a, 10.0).unwrap();
            prop_assert!(d.abs() < 1e-12);
        }

        #[test]
        fn quantiles_are_monotone(seed in any::<u64>(), mut probs in proptest::collection::vec(0.0f64..=1.0, 1..12)) {
            probs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = cdf_quantiles(&field(9, 7, seed), &probs).unwrap();
            prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
