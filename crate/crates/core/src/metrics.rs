//! Image-quality metrics for velocity grids: SSIM, MAE, RMSE.
//!
//! MAE/RMSE are reported in m/s on denormalized grids; SSIM expects grids
//! normalized to [0, 1] (dynamic range L = 1).

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric inputs differ in shape: {0} vs {1} elements")]
    ShapeMismatch(usize, usize),
    #[error("grid {h}×{w} smaller than the {win}×{win} SSIM window")]
    GridTooSmall { h: usize, w: usize, win: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub ssim: f64,
    pub mae: f64,
    pub rmse: f64,
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 1.0e-4; // (0.01 L)², L = 1
const C2: f64 = 9.0e-4; // (0.03 L)²

/// Mean absolute error.
pub fn mae(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricError::ShapeMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Root-mean-square error.
pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricError::ShapeMismatch(a.len(), b.len()));
    }
    Ok(
        (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
            .sqrt(),
    )
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            total += v;
        }
    }
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

/// Structural similarity over sliding Gaussian-weighted windows (valid
/// positions only), averaged. Inputs must be normalized to [0, 1].
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64, MetricError> {
    if a.len() != b.len() || a.len() != h * w {
        return Err(MetricError::ShapeMismatch(a.len(), b.len()));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::GridTooSmall { h, w, win: SSIM_WINDOW });
    }
    let win = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut acc = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let g = win[ky * SSIM_WINDOW + kx];
                    let xa = a[(oy + ky) * w + ox + kx];
                    let xb = b[(oy + ky) * w + ox + kx];
                    ma += g * xa;
                    mb += g * xb;
                    saa += g * (xa * xa);
                    sbb += g * (xb * xb);
                    // Parenthesized so ssim(a,b) == ssim(b,a) bitwise.
                    sab += g * (xa * xb);
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            acc += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
    }
    Ok(acc / (oh * ow) as f64)
}

/// Map a velocity grid into [0, 1] by dataset-global bounds.
pub fn normalize01(grid: &[f64], v_min: f64, v_max: f64) -> Vec<f64> {
    let span = v_max - v_min;
    grid.iter().map(|&v| (v - v_min) / span).collect()
}

/// Full report: MAE/RMSE in m/s, SSIM on [0,1]-normalized grids.
pub fn report(
    a_ms: &[f64],
    b_ms: &[f64],
    v_min: f64,
    v_max: f64,
    h: usize,
    w: usize,
) -> Result<MetricReport, MetricError> {
    Ok(MetricReport {
        ssim: ssim(
            &normalize01(a_ms, v_min, v_max),
            &normalize01(b_ms, v_min, v_max),
            h,
            w,
        )?,
        mae: mae(a_ms, b_ms)?,
        rmse: rmse(a_ms, b_ms)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let a = [1600.0, 1700.0, 1800.0];
        let b: Vec<f64> = a.iter().map(|v| v + 100.0).collect();
        assert!((mae(&a, &b).unwrap() - 100.0).abs() < 1e-12);
        assert!((mae(&[1500.0, 2500.0], &[2000.0, 2000.0]).unwrap() - 500.0).abs() < 1e-12);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        let a = [1600.0, 1700.0, 1800.0];
        let b: Vec<f64> = a.iter().map(|v| v - 250.0).collect();
        assert!((rmse(&a, &b).unwrap() - 250.0).abs() < 1e-12);
        assert!((rmse(&[1.0, 1.0], &[1.0, 3.0]).unwrap() - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ssim_self_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..32 * 32).map(|_| rng.random::<f64>()).collect();
        let s = ssim(&x, &x, 32, 32).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "ssim(x,x) = {}", s);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (p, q) = (0.5, 0.25);
        let a = vec![p; 32 * 32];
        let b = vec![q; 32 * 32];
        let expected = (2.0 * p * q + C1) / (p * p + q * q + C1);
        let s = ssim(&a, &b, 32, 32).unwrap();
        assert!((s - expected).abs() < 1e-6, "{} vs {}", s, expected);
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let a: Vec<f64> = (0..12 * 12).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..12 * 12).map(|_| rng.random::<f64>()).collect();
            let sab = ssim(&a, &b, 12, 12).unwrap();
            let sba = ssim(&b, &a, 12, 12).unwrap();
            assert_eq!(sab.to_bits(), sba.to_bits(), "ssim must be symmetric");
            assert!(sab.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn rmse_dominates_mae() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 3000.0 + 1500.0).collect();
            let b: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 3000.0 + 1500.0).collect();
            assert!(rmse(&a, &b).unwrap() >= mae(&a, &b).unwrap());
        }
    }

    #[test]
    fn error_cases() {
        assert!(matches!(
            mae(&[1.0], &[1.0, 2.0]),
            Err(MetricError::ShapeMismatch(1, 2))
        ));
        assert!(rmse(&[], &[]).is_err());
        let small = vec![0.5; 36];
        assert!(matches!(
            ssim(&small, &small, 6, 6),
            Err(MetricError::GridTooSmall { .. })
        ));
    }

    #[test]
    fn normalization_and_report() {
        let a = vec![1500.0, 4500.0];
        let n = normalize01(&a, 1500.0, 4500.0);
        assert_eq!(n, vec![0.0, 1.0]);
        let grid_a = vec![2000.0; 64 * 64];
        let grid_b = vec![2100.0; 64 * 64];
        let r = report(&grid_a, &grid_b, 1500.0, 4500.0, 64, 64).unwrap();
        assert!((r.mae - 100.0).abs() < 1e-9);
        assert!((r.rmse - 100.0).abs() < 1e-9);
        assert!(r.ssim < 1.0 && r.ssim > 0.9);
    }
}
