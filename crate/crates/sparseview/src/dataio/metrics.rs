//! Image quality metrics: PSNR and single-scale SSIM.

use std::path::Path;

use crate::raster::{Image, Mask};
use crate::{Error, Result};

/// Peak signal-to-noise ratio in dB: `-10 log10(MSE / max^2)`.
///
/// Returns `f64::INFINITY` when the images are identical; callers treat that
/// as the "flagged infinite" case.
pub fn psnr(a: &Image<f32>, b: &Image<f32>, max_value: f64) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Contract(format!(
            "psnr size mismatch: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let mut mse = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = *x as f64 - *y as f64;
        mse += d * d;
    }
    mse /= a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * (mse / (max_value * max_value)).log10())
}

/// PSNR over masked pixels only (all three channels of each masked pixel).
pub fn psnr_masked(a: &Image<f32>, b: &Image<f32>, mask: &Mask, max_value: f64) -> Result<f64> {
    if a.width() != b.width()
        || a.height() != b.height()
        || mask.width() != a.width()
        || mask.height() != a.height()
    {
        return Err(Error::Contract("psnr_masked size mismatch".into()));
    }
    let mut mse = 0.0f64;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if !mask.get(x, y) {
                continue;
            }
            let (pa, pb) = (a.get(x, y), b.get(x, y));
            for c in 0..3 {
                let d = pa[c] as f64 - pb[c] as f64;
                mse += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::Contract("psnr_masked: empty mask".into()));
    }
    mse /= n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * (mse / (max_value * max_value)).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Map of local SSIM values over all valid (fully interior) window centers.
/// Input images are converted to luma with Rec. 601 weights.
fn ssim_map(a: &Image<f32>, b: &Image<f32>) -> Result<(Vec<f64>, usize, usize)> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Contract(format!(
            "ssim size mismatch: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let la: Vec<f64> = a.luma().iter().map(|&v| v as f64).collect();
    let lb: Vec<f64> = b.luma().iter().map(|&v| v as f64).collect();
    let kernel = gaussian_kernel();
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);

    // Separable Gaussian pass over the five raw moment planes.
    let planes: [&dyn Fn(usize) -> f64; 5] = [
        &|i| la[i],
        &|i| lb[i],
        &|i| la[i] * la[i],
        &|i| lb[i] * lb[i],
        &|i| la[i] * lb[i],
    ];
    let mut filtered: Vec<Vec<f64>> = Vec::with_capacity(5);
    for plane in planes {
        // Horizontal.
        let mut tmp = vec![0.0f64; ow * h];
        for y in 0..h {
            for ox in 0..ow {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * plane(y * w + ox + k);
                }
                tmp[y * ow + ox] = acc;
            }
        }
        // Vertical.
        let mut out = vec![0.0f64; ow * oh];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[(oy + k) * ow + ox];
                }
                out[oy * ow + ox] = acc;
            }
        }
        filtered.push(out);
    }

    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut map = vec![0.0f64; ow * oh];
    for i in 0..ow * oh {
        let mu_a = filtered[0][i];
        let mu_b = filtered[1][i];
        let var_a = filtered[2][i] - mu_a * mu_a;
        let var_b = filtered[3][i] - mu_b * mu_b;
        let cov = filtered[4][i] - mu_a * mu_b;
        map[i] = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
            / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    }
    Ok((map, ow, oh))
}

/// Mean single-scale SSIM (11x11 Gaussian window, sigma 1.5, k1 = 0.01,
/// k2 = 0.03) over all valid window positions.
pub fn ssim(a: &Image<f32>, b: &Image<f32>) -> Result<f64> {
    let (map, _, _) = ssim_map(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Mean SSIM over windows whose center pixel is masked true.
pub fn ssim_masked(a: &Image<f32>, b: &Image<f32>, mask: &Mask) -> Result<f64> {
    let (map, ow, oh) = ssim_map(a, b)?;
    let off = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for oy in 0..oh {
        for ox in 0..ow {
            if mask.get(ox + off, oy + off) {
                sum += map[oy * ow + ox];
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Contract("ssim_masked: empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// Per-view metrics row.
#[derive(Debug, Clone)]
pub struct ViewMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Evaluation summary written to CSV: per-view rows plus means, with the
/// run configuration echoed as comment lines.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_view: Vec<ViewMetrics>,
    pub config_echo: Vec<(String, String)>,
}

impl MetricReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.per_view.iter().map(|v| v.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.per_view.iter().map(|v| v.ssim))
    }

    /// CSV with `# key=value` comment lines, a header, one row per view, and
    /// a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.config_echo {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str("view,psnr_db,ssim\n");
        for v in &self.per_view {
            out.push_str(&format!("{},{},{}\n", v.name, v.psnr, v.ssim));
        }
        out.push_str(&format!("mean,{},{}\n", self.mean_psnr(), self.mean_ssim()));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> Image<f32> {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = f(x, y);
                img.set(x, y, [v, v, v]);
            }
        }
        img
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let img = pattern(8, 8, |x, y| (x * y) as f32 / 64.0);
        let v = psnr(&img, &img, 1.0).unwrap();
        assert!(v.is_infinite());
    }

    #[test]
    fn psnr_of_known_mse() {
        // Uniform error of 0.1 -> MSE 0.01 -> 20 dB at max 1.
        let a = pattern(8, 8, |_, _| 0.5);
        let b = pattern(8, 8, |_, _| 0.6);
        let v = psnr(&a, &b, 1.0).unwrap();
        // f32 storage of 0.6 perturbs the MSE in the 7th digit.
        assert!((v - 20.0).abs() < 1e-4, "{v}");
    }

    #[test]
    fn psnr_matches_direct_formula_on_random_pair() {
        let a = pattern(9, 7, |x, y| ((x * 31 + y * 17) % 13) as f32 / 13.0);
        let b = pattern(9, 7, |x, y| ((x * 7 + y * 29) % 11) as f32 / 11.0);
        let v = psnr(&a, &b, 1.0).unwrap();
        let mut mse = 0.0f64;
        for (p, q) in a.data().iter().zip(b.data()) {
            mse += (*p as f64 - *q as f64).powi(2);
        }
        mse /= a.data().len() as f64;
        let direct = -10.0 * mse.log10();
        assert!((v - direct).abs() < 1e-9);
    }

    #[test]
    fn ssim_identical_is_one() {
        let img = pattern(16, 16, |x, y| ((x + y) % 5) as f32 / 5.0);
        let v = ssim(&img, &img).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn ssim_of_negated_pattern_is_negative() {
        // Anticorrelated structure around mid-gray.
        let a = pattern(24, 24, |x, y| 0.5 + 0.4 * (((x + y) % 2) as f32 - 0.5));
        let b = pattern(24, 24, |x, y| 0.5 - 0.4 * (((x + y) % 2) as f32 - 0.5));
        let v = ssim(&a, &b).unwrap();
        assert!(v < 0.0, "{v}");
    }

    #[test]
    fn ssim_matches_windowed_formula_on_flat_vs_contrast() {
        // Constant image vs constant + contrast pattern: every window has
        // mu_a = 0.5, and the direct formula can be evaluated per window.
        let a = pattern(16, 16, |_, _| 0.5);
        let b = pattern(16, 16, |x, _| if x % 2 == 0 { 0.4 } else { 0.6 });
        let got = ssim(&a, &b).unwrap();

        // Direct oracle: same Gaussian window, same constants.
        let kernel = gaussian_kernel();
        let la: Vec<f64> = a.luma().iter().map(|&v| v as f64).collect();
        let lb: Vec<f64> = b.luma().iter().map(|&v| v as f64).collect();
        let (w, ow, oh) = (16usize, 6usize, 6usize);
        let mut acc = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let wgt = kernel[ky] * kernel[kx];
                        let pa = la[(oy + ky) * w + ox + kx];
                        let pb = lb[(oy + ky) * w + ox + kx];
                        ma += wgt * pa;
                        mb += wgt * pb;
                        saa += wgt * pa * pa;
                        sbb += wgt * pb * pb;
                        sab += wgt * pa * pb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                let c1 = SSIM_K1 * SSIM_K1;
                let c2 = SSIM_K2 * SSIM_K2;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        let direct = acc / (ow * oh) as f64;
        assert!((got - direct).abs() < 1e-6, "{got} vs {direct}");
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let img = pattern(8, 8, |_, _| 0.5);
        assert!(matches!(ssim(&img, &img), Err(Error::Config(_))));
    }

    #[test]
    fn report_mean_is_arithmetic_mean() {
        let report = MetricReport {
            per_view: vec![
                ViewMetrics {
                    name: "a".into(),
                    psnr: 20.0,
                    ssim: 0.8,
                },
                ViewMetrics {
                    name: "b".into(),
                    psnr: 30.0,
                    ssim: 0.6,
                },
            ],
            config_echo: vec![("split".into(), "test".into())],
        };
        assert!((report.mean_psnr() - 25.0).abs() < 1e-12);
        assert!((report.mean_ssim() - 0.7).abs() < 1e-12);
        let csv = report.to_csv();
        assert!(csv.starts_with("# split=test\n"));
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
    }
}
