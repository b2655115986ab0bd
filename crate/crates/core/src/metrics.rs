//! PSNR and SSIM for images and volumes, and per-case reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::Image2D;
use crate::volume::Volume;

pub const DATA_RANGE: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: vec![a],
            rhs: vec![b],
        });
    }
    Ok(())
}

/// `10 log10(255^2 / MSE)`; `+inf` for identical inputs.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DATA_RANGE * DATA_RANGE / mse).log10())
}

pub fn psnr_volume(a: &Volume, b: &Volume) -> Result<f64> {
    check_dims(&a.dims(), &b.dims())?;
    psnr(a.data(), b.data())
}

pub fn psnr_image(a: &Image2D, b: &Image2D) -> Result<f64> {
    check_dims(&a.dims(), &b.dims())?;
    psnr(a.pixels(), b.pixels())
}

fn check_dims(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `rows x cols` image.
fn filter_valid(x: &[f64], rows: usize, cols: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (or, oc) = (rows - n + 1, cols - n + 1);
    let mut tmp = vec![0.0; rows * oc];
    for r in 0..rows {
        for c in 0..oc {
            tmp[r * oc + c] = (0..n).map(|t| k[t] * x[r * cols + c + t]).sum();
        }
    }
    let mut out = vec![0.0; or * oc];
    for r in 0..or {
        for c in 0..oc {
            out[r * oc + c] = (0..n).map(|t| k[t] * tmp[(r + t) * oc + c]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 Gaussian windows of a `rows x cols` image.
pub fn ssim(a: &[f32], b: &[f32], rows: usize, cols: usize) -> Result<f64> {
    ssim_windowed(a, b, rows, cols, SSIM_WINDOW)
}

/// SSIM with a `window x window` Gaussian; sigma scales as `1.5 * window / 11`.
pub fn ssim_windowed(a: &[f32], b: &[f32], rows: usize, cols: usize, window: usize) -> Result<f64> {
    check_len(a.len(), b.len())?;
    check_len(a.len(), rows * cols)?;
    if window == 0 || rows < window || cols < window {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {window}x{window}, got {rows}x{cols}"
        )));
    }
    let sigma = SSIM_SIGMA * window as f64 / SSIM_WINDOW as f64;
    let k = gaussian_window(window, sigma);
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|v| filter_valid(v, rows, cols, &k));
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn ssim_image(a: &Image2D, b: &Image2D) -> Result<f64> {
    check_dims(&a.dims(), &b.dims())?;
    let [r, c] = a.dims();
    ssim(a.pixels(), b.pixels(), r, c)
}

/// Mean SSIM over axial slices (fixed `d`, images over `(h, w)`).
///
/// Slices narrower than 11 use the largest odd window that fits.
pub fn ssim_volume(a: &Volume, b: &Volume) -> Result<f64> {
    check_dims(&a.dims(), &b.dims())?;
    let [_, hn, wn, dn] = a.dims();
    let fit = hn.min(wn).min(SSIM_WINDOW);
    let window = if fit % 2 == 0 { fit.saturating_sub(1) } else { fit };
    let slice = |v: &Volume, d: usize| -> Vec<f32> {
        (0..hn).flat_map(|h| (0..wn).map(move |w| (h, w))).map(|(h, w)| v.get(h, w, d)).collect()
    };
    let mut acc = 0.0;
    for d in 0..dn {
        acc += ssim_windowed(&slice(a, d), &slice(b, d), hn, wn, window)?;
    }
    Ok(acc / dn as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Sample mean and standard deviation (`n - 1`); std is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    /// SSIM statistics in percent.
    pub ssim_mean_pct: f64,
    pub ssim_std_pct: f64,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

impl MetricReport {
    pub fn new(cases: Vec<CaseMetrics>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Degenerate("metric report needs at least one case".into()));
        }
        let p: Vec<f64> = cases.iter().map(|c| c.psnr_db).collect();
        let s: Vec<f64> = cases.iter().map(|c| c.ssim * 100.0).collect();
        let (psnr_mean, psnr_std) = if p.iter().any(|v| v.is_infinite()) {
            (f64::INFINITY, 0.0)
        } else {
            mean_std(&p)
        };
        let (ssim_mean_pct, ssim_std_pct) = mean_std(&s);
        Ok(MetricReport {
            cases,
            psnr_mean,
            psnr_std,
            ssim_mean_pct,
            ssim_std_pct,
        })
    }

    /// `case,psnr_db,ssim_pct` rows; infinite PSNR is written as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,psnr_db,ssim_pct\n");
        for c in &self.cases {
            let _ = writeln!(out, "{},{},{:.4}", c.case, fmt_db(c.psnr_db), c.ssim * 100.0);
        }
        out
    }

    /// One summary row: `PSNR (dB) mean±std | SSIM (%) mean±std`.
    pub fn table(&self) -> String {
        format!(
            "| Method | PSNR (dB) | SSIM (%) |\n|---|---|---|\n| ours | {}±{:.2} | {:.2}±{:.2} |\n",
            if self.psnr_mean.is_infinite() { "inf".to_string() } else { format!("{:.2}", self.psnr_mean) },
            self.psnr_std,
            self.ssim_mean_pct,
            self.ssim_std_pct
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_closed_forms() {
        let a = vec![10.0f32; 50];
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let z = vec![0.0f32; 50];
        let f = vec![255.0f32; 50];
        assert_eq!(psnr(&z, &f).unwrap(), 0.0);
        assert!(psnr(&z, &f[..49]).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base: Vec<f32> = (0..1000).map(|_| rng.random_range(50.0..200.0)).collect();
        let noise: Vec<f32> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [1.0, 5.0, 20.0] {
            let noisy: Vec<f32> = base.iter().zip(&noise).map(|(b, n)| b + amp * n).collect();
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_luminance_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f32> = (0..16 * 20).map(|_| rng.random_range(0.0..255.0)).collect();
        assert!((ssim(&a, &a, 16, 20).unwrap() - 1.0).abs() < 1e-12);
        let c1 = vec![100.0f32; 15 * 15];
        let c2 = vec![140.0f32; 15 * 15];
        let k1 = (0.01f64 * 255.0).powi(2);
        let expect = (2.0 * 100.0 * 140.0 + k1) / (100.0f64 * 100.0 + 140.0 * 140.0 + k1);
        assert!((ssim(&c1, &c2, 15, 15).unwrap() - expect).abs() < 1e-9);
        assert!(ssim(&c1[..100], &c2[..100], 10, 10).is_err());
    }

    #[test]
    fn ssim_anticorrelated_pattern_is_low() {
        let a: Vec<f32> = (0..32 * 32).map(|i| if (i / 32 + i % 32) % 2 == 0 { 255.0 } else { 0.0 }).collect();
        let b: Vec<f32> = a.iter().map(|v| 255.0 - v).collect();
        assert!(ssim(&a, &b, 32, 32).unwrap() < 0.5);
    }

    #[test]
    fn ssim_is_symmetric_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f32> = (0..12 * 14).map(|_| rng.random_range(0.0..255.0)).collect();
        let b: Vec<f32> = (0..12 * 14).map(|_| rng.random_range(0.0..255.0)).collect();
        let ab = ssim(&a, &b, 12, 14).unwrap();
        assert!((ab - ssim(&b, &a, 12, 14).unwrap()).abs() < 1e-12);
        // transposing both images permutes windows identically
        let t = |v: &[f32]| -> Vec<f32> { (0..14).flat_map(|c| (0..12).map(move |r| (r, c))).map(|(r, c)| v[r * 14 + c]).collect() };
        assert!((ab - ssim(&t(&a), &t(&b), 14, 12).unwrap()).abs() < 1e-9);
        assert!((psnr(&a, &b).unwrap() - psnr(&t(&a), &t(&b)).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(w[i], w[10 - i]);
        }
    }

    #[test]
    fn volume_ssim_and_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Volume::new([1, 12, 13, 3], (0..12 * 13 * 3).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap();
        assert!((ssim_volume(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let r = MetricReport::new(vec![
            CaseMetrics { case: "a".into(), psnr_db: 20.0, ssim: 0.5 },
            CaseMetrics { case: "b".into(), psnr_db: 22.0, ssim: 0.7 },
        ])
        .unwrap();
        assert_eq!(r.psnr_mean, 21.0);
        assert!((r.psnr_std - 2f64.sqrt()).abs() < 1e-12);
        assert!((r.ssim_mean_pct - 60.0).abs() < 1e-12);
        assert!(r.to_csv().starts_with("case,psnr_db,ssim_pct\na,20.0000,50.0000\n"));
        let inf = MetricReport::new(vec![CaseMetrics { case: "x".into(), psnr_db: f64::INFINITY, ssim: 1.0 }]).unwrap();
        assert!(inf.to_csv().contains("x,inf,100.0000"));
        assert!(inf.table().contains("| ours | inf±0.00 | 100.00±0.00 |"));
        assert!(MetricReport::new(vec![]).is_err());
    }

    #[test]
    fn small_volumes_shrink_the_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Volume::new([1, 8, 16, 2], (0..256).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap();
        let b = Volume::new([1, 8, 16, 2], a.data().iter().map(|v| 255.0 - v).collect()).unwrap();
        assert!((ssim_volume(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let slice: Vec<f32> = (0..8).flat_map(|h| (0..16).map(move |w| (h, w))).map(|(h, w)| a.get(h, w, 0)).collect();
        let other: Vec<f32> = slice.iter().map(|v| 255.0 - v).collect();
        let direct = ssim_windowed(&slice, &other, 8, 16, 7).unwrap();
        assert!(ssim_volume(&a, &b).unwrap() < 0.5 && direct < 0.5);
        assert!(ssim_windowed(&slice, &slice, 8, 16, 9).is_err());
    }
}
