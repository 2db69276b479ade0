//! Training losses: the saliency-split photometric term, a multi-scale
//! embedding-consistency term over nested center crops, and the
//! information-potential term that sharpens per-ray weight distributions.
//!
//! Every loss returns its gradient alongside its value; all gradients are
//! verified against central finite differences in the test suite.

use std::path::Path;

use crate::raster::{resize_bilinear, resize_bilinear_backward, Image};
use crate::{real::real, Error, Real, Result};

/// One training step's loss terms, raw (unweighted), plus contribution
/// counts.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub photometric_fg: f64,
    pub photometric_bg: f64,
    pub msc: f64,
    pub ip: f64,
    pub total: f64,
    pub rays_fg: usize,
    pub rays_bg: usize,
    pub rays_real: usize,
    pub rays_pseudo: usize,
    pub ip_rays: usize,
}

impl LossBreakdown {
    /// Recombine the raw terms; equals `total` within round-off.
    pub fn recombined(&self, bg_weight: f64, lambda_msc: f64, lambda_ip: f64) -> f64 {
        self.photometric_fg
            + bg_weight * self.photometric_bg
            + lambda_msc * self.msc
            + lambda_ip * self.ip
    }
}

/// Saliency-split mean-squared photometric loss.
#[derive(Debug, Clone)]
pub struct PhotometricLoss<F> {
    /// Mean squared error over valid foreground pixels.
    pub foreground: F,
    /// Mean squared error over valid background pixels.
    pub background: F,
    /// `foreground + bg_weight * background`.
    pub combined: F,
    pub n_foreground: usize,
    pub n_background: usize,
    /// Gradient of `combined` with respect to the rendered colors.
    pub grad: Vec<[F; 3]>,
    /// True when a region had no valid pixels (its term is zero).
    pub empty_region: bool,
}

/// Mean squared error computed separately over valid foreground and valid
/// background pixels, combined as `L_fg + bg_weight * L_bg`. Invalid pixels
/// contribute nothing, to either term or gradient.
pub fn photometric_loss<F: Real>(
    rendered: &[[F; 3]],
    reference: &[[F; 3]],
    validity: &[bool],
    saliency: &[bool],
    bg_weight: F,
) -> Result<PhotometricLoss<F>> {
    let n = rendered.len();
    if reference.len() != n || validity.len() != n || saliency.len() != n {
        return Err(Error::Contract(format!(
            "photometric batch length mismatch: {n} rendered vs {} reference, {} validity, {} saliency",
            reference.len(),
            validity.len(),
            saliency.len()
        )));
    }
    let mut sum_fg = F::zero();
    let mut sum_bg = F::zero();
    let mut n_fg = 0usize;
    let mut n_bg = 0usize;
    for i in 0..n {
        if !validity[i] {
            continue;
        }
        let mut e = F::zero();
        for c in 0..3 {
            let d = rendered[i][c] - reference[i][c];
            e += d * d;
        }
        if saliency[i] {
            sum_fg += e;
            n_fg += 1;
        } else {
            sum_bg += e;
            n_bg += 1;
        }
    }
    let foreground = if n_fg > 0 {
        sum_fg / real(n_fg as f64)
    } else {
        F::zero()
    };
    let background = if n_bg > 0 {
        sum_bg / real(n_bg as f64)
    } else {
        F::zero()
    };
    let combined = foreground + bg_weight * background;

    let two = real::<F>(2.0);
    let mut grad = vec![[F::zero(); 3]; n];
    for i in 0..n {
        if !validity[i] {
            continue;
        }
        let scale = if saliency[i] {
            if n_fg == 0 {
                continue;
            }
            two / real(n_fg as f64)
        } else {
            if n_bg == 0 {
                continue;
            }
            two * bg_weight / real(n_bg as f64)
        };
        for c in 0..3 {
            grad[i][c] = scale * (rendered[i][c] - reference[i][c]);
        }
    }
    Ok(PhotometricLoss {
        foreground,
        background,
        combined,
        n_foreground: n_fg,
        n_background: n_bg,
        grad,
        empty_region: n_fg == 0 || n_bg == 0,
    })
}

/// Maps an image to a feature vector; pluggable so a learned embedding can
/// replace the built-in one without touching the loss.
pub trait EmbeddingProvider<F: Real> {
    /// Square side length images are resized to before embedding.
    fn input_size(&self) -> usize;

    /// Smallest center-crop side the provider accepts.
    fn min_crop(&self) -> usize;

    /// Nested center-crop fractions, strictly increasing, ending at 1.
    fn crop_fractions(&self) -> &[f64];

    fn embed(&self, image: &Image<F>) -> Vec<F>;

    /// Pull an upstream feature gradient back to image space; `None` for
    /// non-differentiable providers (evaluation-only embeddings).
    fn embed_backward(&self, image: &Image<F>, upstream: &[F]) -> Option<Image<F>>;
}

/// Deterministic differentiable embedding: per-cell mean colors and mean
/// absolute finite-difference gradients over a fixed grid, L2-normalized.
#[derive(Debug, Clone)]
pub struct BuiltinEmbedding {
    pub grid: usize,
    pub input: usize,
    pub fractions: Vec<f64>,
}

impl Default for BuiltinEmbedding {
    fn default() -> Self {
        Self {
            grid: 4,
            input: 32,
            fractions: vec![1.0 / 3.0, 2.0 / 3.0, 1.0],
        }
    }
}

impl BuiltinEmbedding {
    pub fn feature_len(&self) -> usize {
        self.grid * self.grid * 6
    }

    /// Raw (pre-normalization) features: 6 per cell — 3 color means and 3
    /// mean absolute gradient magnitudes, one per channel.
    fn raw_features<F: Real>(&self, image: &Image<F>) -> Vec<F> {
        let s = self.input;
        debug_assert_eq!(image.width(), s);
        debug_assert_eq!(image.height(), s);
        let cell = s / self.grid;
        let cell_px = real::<F>((cell * cell) as f64);
        let half = real::<F>(0.5);
        let mut f = Vec::with_capacity(self.feature_len());
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let mut mean = [F::zero(); 3];
                let mut grad = [F::zero(); 3];
                for y in gy * cell..(gy + 1) * cell {
                    for x in gx * cell..(gx + 1) * cell {
                        let p = image.get(x, y);
                        for c in 0..3 {
                            mean[c] += p[c];
                        }
                        if x + 1 < s {
                            let q = image.get(x + 1, y);
                            for c in 0..3 {
                                grad[c] += (q[c] - p[c]).abs() * half;
                            }
                        }
                        if y + 1 < s {
                            let q = image.get(x, y + 1);
                            for c in 0..3 {
                                grad[c] += (q[c] - p[c]).abs() * half;
                            }
                        }
                    }
                }
                for c in 0..3 {
                    f.push(mean[c] / cell_px);
                }
                for c in 0..3 {
                    f.push(grad[c] / cell_px);
                }
            }
        }
        f
    }
}

impl<F: Real> EmbeddingProvider<F> for BuiltinEmbedding {
    fn input_size(&self) -> usize {
        self.input
    }

    fn min_crop(&self) -> usize {
        self.grid
    }

    fn crop_fractions(&self) -> &[f64] {
        &self.fractions
    }

    fn embed(&self, image: &Image<F>) -> Vec<F> {
        let f = self.raw_features(image);
        let norm = f.iter().map(|&v| v * v).sum::<F>().sqrt();
        if norm > real(1e-12) {
            f.into_iter().map(|v| v / norm).collect()
        } else {
            f
        }
    }

    fn embed_backward(&self, image: &Image<F>, upstream: &[F]) -> Option<Image<F>> {
        let f = self.raw_features(image);
        let norm_sq: F = f.iter().map(|&v| v * v).sum();
        let norm = norm_sq.sqrt();
        // Through f_hat = f / |f|:  d = (g - f_hat (f_hat . g)) / |f|.
        let d_raw: Vec<F> = if norm > real(1e-12) {
            let fhat: Vec<F> = f.iter().map(|&v| v / norm).collect();
            let dot: F = fhat.iter().zip(upstream).map(|(&a, &g)| a * g).sum();
            fhat.iter()
                .zip(upstream)
                .map(|(&a, &g)| (g - a * dot) / norm)
                .collect()
        } else {
            upstream.to_vec()
        };

        let s = self.input;
        let cell = s / self.grid;
        let cell_px = real::<F>((cell * cell) as f64);
        let half = real::<F>(0.5);
        let mut out = Image::new(s, s);
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let base = (gy * self.grid + gx) * 6;
                for y in gy * cell..(gy + 1) * cell {
                    for x in gx * cell..(gx + 1) * cell {
                        let p = image.get(x, y);
                        let mut acc = [F::zero(); 3];
                        for c in 0..3 {
                            acc[c] += d_raw[base + c] / cell_px;
                        }
                        // |q - p| routes sign(q - p) to q and its negation to
                        // p; exact zeros get subgradient zero.
                        if x + 1 < s {
                            let q = image.get(x + 1, y);
                            for c in 0..3 {
                                let sgn = sign(q[c] - p[c]);
                                let coef = d_raw[base + 3 + c] * half / cell_px;
                                acc[c] -= coef * sgn;
                                add_pixel(&mut out, x + 1, y, c, coef * sgn);
                            }
                        }
                        if y + 1 < s {
                            let q = image.get(x, y + 1);
                            for c in 0..3 {
                                let sgn = sign(q[c] - p[c]);
                                let coef = d_raw[base + 3 + c] * half / cell_px;
                                acc[c] -= coef * sgn;
                                add_pixel(&mut out, x, y + 1, c, coef * sgn);
                            }
                        }
                        for c in 0..3 {
                            add_pixel(&mut out, x, y, c, acc[c]);
                        }
                    }
                }
            }
        }
        Some(out)
    }
}

fn sign<F: Real>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

fn add_pixel<F: Real>(img: &mut Image<F>, x: usize, y: usize, c: usize, v: F) {
    let w = img.width();
    img.data_mut()[(y * w + x) * 3 + c] += v;
}

/// Multi-scale consistency result.
#[derive(Debug, Clone)]
pub struct MscLoss<F> {
    /// Sum over levels of `1 - cosine similarity`; zero iff all levels match.
    pub value: F,
    pub similarities: Vec<F>,
    /// Gradient with respect to the synthesized image, when requested.
    pub grad: Option<Image<F>>,
}

/// Embedding-consistency loss over nested center crops.
///
/// For each crop fraction, both images are center-cropped, rescaled to the
/// provider's input size, and embedded; the loss accumulates
/// `1 - cos(embed(synth), embed(reference))` so that minimizing it drives
/// the similarities toward one.
pub fn msc_loss<F: Real>(
    synth: &Image<F>,
    reference: &Image<F>,
    provider: &dyn EmbeddingProvider<F>,
    want_grad: bool,
) -> Result<MscLoss<F>> {
    if synth.width() != reference.width() || synth.height() != reference.height() {
        return Err(Error::Contract(format!(
            "image sizes differ: {}x{} vs {}x{}",
            synth.width(),
            synth.height(),
            reference.width(),
            reference.height()
        )));
    }
    let side = synth.width().min(synth.height());
    let input = provider.input_size();
    let mut value = F::zero();
    let mut similarities = Vec::new();
    let mut grad = want_grad.then(|| Image::<F>::new(synth.width(), synth.height()));

    for &frac in provider.crop_fractions() {
        let size = ((side as f64 * frac).round() as usize).max(1);
        if size < provider.min_crop() {
            return Err(Error::Config(format!(
                "crop {size}px below provider minimum {}px",
                provider.min_crop()
            )));
        }
        let crop_s = synth.center_crop(size)?;
        let crop_r = reference.center_crop(size)?;
        let in_s = resize_bilinear(&crop_s, input, input);
        let in_r = resize_bilinear(&crop_r, input, input);
        let a = provider.embed(&in_s);
        let b = provider.embed(&in_r);
        let (sim, d_a) = cosine_and_grad(&a, &b);
        similarities.push(sim);
        value += F::one() - sim;

        if let Some(total) = grad.as_mut() {
            // d(1 - S)/da = -dS/da, pulled back through embed, resize, crop.
            let upstream: Vec<F> = d_a.iter().map(|&v| -v).collect();
            let d_input = provider
                .embed_backward(&in_s, &upstream)
                .ok_or_else(|| Error::Config("embedding provider is not differentiable".into()))?;
            let d_crop = resize_bilinear_backward(size, size, &d_input);
            let d_full = synth.center_crop_backward(&d_crop);
            for (t, g) in total.data_mut().iter_mut().zip(d_full.data()) {
                *t += *g;
            }
        }
    }
    Ok(MscLoss {
        value,
        similarities,
        grad,
    })
}

/// Cosine similarity and its gradient with respect to the first argument.
fn cosine_and_grad<F: Real>(a: &[F], b: &[F]) -> (F, Vec<F>) {
    let eps = real::<F>(1e-12);
    let na = a.iter().map(|&v| v * v).sum::<F>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<F>().sqrt();
    if na < eps || nb < eps {
        return (F::zero(), vec![F::zero(); a.len()]);
    }
    let dot: F = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let sim = dot / (na * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y / (na * nb) - sim * x / (na * na))
        .collect();
    (sim, grad)
}

/// Information-potential result.
#[derive(Debug, Clone)]
pub struct IpLoss<F> {
    /// `-(1/|R|) sum_r sum_i normalized_w_i(r)^2` over included rays.
    pub value: F,
    /// Per-ray gradients with respect to the raw weights.
    pub grad: Vec<Vec<F>>,
    pub included: usize,
    pub excluded: usize,
}

/// Threshold below which a ray's weight mass is considered empty and the ray
/// is excluded from the information potential.
pub const IP_WEIGHT_EPS: f64 = 1e-6;

/// Negated mean over rays of the sum of squared normalized weights.
///
/// Each ray's weights are normalized to a distribution first, so the value
/// is invariant to positive rescaling and bounded in `[-1, -1/N]` for `N`
/// samples: `-1` at a one-hot distribution, `-1/N` at a uniform one.
/// Minimizing it concentrates the weight mass.
pub fn ip_loss<F: Real>(weights: &[Vec<F>]) -> Result<IpLoss<F>> {
    let eps = real::<F>(IP_WEIGHT_EPS);
    for (r, w) in weights.iter().enumerate() {
        if w.is_empty() {
            return Err(Error::Contract(format!("ray {r} has no samples")));
        }
        if w.iter().any(|&v| v < F::zero()) {
            return Err(Error::Contract(format!("ray {r} has negative weights")));
        }
    }
    let mut grad: Vec<Vec<F>> = weights.iter().map(|w| vec![F::zero(); w.len()]).collect();
    let mut included_rays = Vec::with_capacity(weights.len());
    for (r, w) in weights.iter().enumerate() {
        let s: F = w.iter().copied().sum();
        if s <= eps {
            continue;
        }
        let q: F = w.iter().map(|&v| (v / s) * (v / s)).sum();
        included_rays.push((r, s, q));
    }
    let included = included_rays.len();
    let excluded = weights.len() - included;
    if included == 0 {
        return Ok(IpLoss {
            value: F::zero(),
            grad,
            included,
            excluded,
        });
    }
    let inv_n = F::one() / real(included as f64);
    let value = -inv_n * included_rays.iter().map(|&(_, _, q)| q).sum::<F>();
    let two = real::<F>(2.0);
    for &(r, s, q) in &included_rays {
        for (i, g) in grad[r].iter_mut().enumerate() {
            let wt = weights[r][i] / s;
            *g = -inv_n * two / s * (wt - q);
        }
    }
    Ok(IpLoss {
        value,
        grad,
        included,
        excluded,
    })
}

/// Read a precomputed embedding: a flat file of little-endian f32 values,
/// nothing else. Used for evaluation against external feature extractors.
pub fn load_embedding_file(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Cosine similarity of two external embeddings.
pub fn embedding_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "embedding lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    Ok(cosine_and_grad(&af, &bf).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn photometric_zero_on_match() {
        let pix = [[0.1f64, 0.2, 0.3], [0.4, 0.5, 0.6]];
        let l = photometric_loss(&pix, &pix, &[true, true], &[true, false], 1.0).unwrap();
        assert_eq!(l.combined, 0.0);
        assert!(l.grad.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn photometric_all_invalid_flags() {
        let pix = [[0.1f64, 0.2, 0.3]];
        let refs = [[0.9f64, 0.2, 0.3]];
        let l = photometric_loss(&pix, &refs, &[false], &[true], 1.0).unwrap();
        assert_eq!(l.combined, 0.0);
        assert!(l.empty_region);
    }

    #[test]
    fn photometric_two_pixel_arithmetic() {
        // fg squared error 0.04, bg squared error 0.01, bg_weight 0.5 -> 0.045.
        let rendered = [[0.2f64, 0.0, 0.0], [0.1, 0.0, 0.0]];
        let reference = [[0.0f64, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let l =
            photometric_loss(&rendered, &reference, &[true, true], &[true, false], 0.5).unwrap();
        assert!((l.foreground - 0.04).abs() < 1e-15);
        assert!((l.background - 0.01).abs() < 1e-15);
        assert!((l.combined - 0.045).abs() < 1e-15);
    }

    #[test]
    fn photometric_invariant_to_order_and_invalid_padding() {
        let rendered = [[0.2f64, 0.1, 0.0], [0.6, 0.5, 0.4], [0.3, 0.3, 0.3]];
        let reference = [[0.0f64, 0.0, 0.1], [0.5, 0.5, 0.5], [0.2, 0.4, 0.3]];
        let validity = [true, true, true];
        let saliency = [true, false, true];
        let l1 = photometric_loss(&rendered, &reference, &validity, &saliency, 0.7).unwrap();

        let perm = [2usize, 0, 1];
        let r2: Vec<_> = perm.iter().map(|&i| rendered[i]).collect();
        let f2: Vec<_> = perm.iter().map(|&i| reference[i]).collect();
        let v2: Vec<_> = perm.iter().map(|&i| validity[i]).collect();
        let s2: Vec<_> = perm.iter().map(|&i| saliency[i]).collect();
        let l2 = photometric_loss(&r2, &f2, &v2, &s2, 0.7).unwrap();
        assert!((l1.combined - l2.combined).abs() < 1e-15);

        let mut r3 = rendered.to_vec();
        r3.push([9.0, 9.0, 9.0]);
        let mut f3 = reference.to_vec();
        f3.push([0.0, 0.0, 0.0]);
        let l3 = photometric_loss(
            &r3,
            &f3,
            &[true, true, true, false],
            &[true, false, true, true],
            0.7,
        )
        .unwrap();
        assert!((l1.combined - l3.combined).abs() < 1e-15);
    }

    #[test]
    fn ip_extremes() {
        // One-hot: -1; uniform over N: -1/N; (0.5, 0.5, 0, 0): -0.5.
        let one_hot = vec![vec![0.0f64, 0.9, 0.0, 0.0]];
        assert!((ip_loss(&one_hot).unwrap().value + 1.0).abs() < 1e-12);
        let uniform = vec![vec![0.2f64; 5]];
        assert!((ip_loss(&uniform).unwrap().value + 0.2).abs() < 1e-12);
        let two_point = vec![vec![0.5f64, 0.5, 0.0, 0.0]];
        assert!((ip_loss(&two_point).unwrap().value + 0.5).abs() < 1e-12);
    }

    #[test]
    fn ip_excludes_empty_rays() {
        let rays = vec![vec![0.0f64; 4], vec![0.4, 0.4, 0.0, 0.0]];
        let l = ip_loss(&rays).unwrap();
        assert_eq!(l.included, 1);
        assert_eq!(l.excluded, 1);
        assert!((l.value + 0.5).abs() < 1e-12);
        assert!(l.grad[0].iter().all(|&g| g == 0.0));

        let all_empty = vec![vec![0.0f64; 4]];
        let l = ip_loss(&all_empty).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.included, 0);
    }

    #[test]
    fn ip_scale_invariance() {
        let base = vec![vec![0.1f64, 0.3, 0.2, 0.05]];
        let scaled = vec![vec![0.4f64, 1.2, 0.8, 0.2]];
        let a = ip_loss(&base).unwrap().value;
        let b = ip_loss(&scaled).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ip_bounds_hold() {
        let rays = vec![
            vec![0.3f64, 0.1, 0.25, 0.05],
            vec![0.01f64, 0.6, 0.02, 0.3],
        ];
        let l = ip_loss(&rays).unwrap();
        let n = 4.0;
        assert!(l.value >= -1.0 - 1e-12 && l.value <= -1.0 / n + 1e-12);
    }

    #[test]
    fn ip_gradient_matches_finite_differences() {
        let weights = vec![vec![0.12f64, 0.31, 0.07, 0.22], vec![0.4, 0.05, 0.18, 0.09]];
        let l = ip_loss(&weights).unwrap();
        let eps = 1e-6;
        for r in 0..weights.len() {
            for i in 0..weights[r].len() {
                let mut plus = weights.clone();
                plus[r][i] += eps;
                let mut minus = weights.clone();
                minus[r][i] -= eps;
                let fd =
                    (ip_loss(&plus).unwrap().value - ip_loss(&minus).unwrap().value) / (2.0 * eps);
                let an = l.grad[r][i];
                assert!(
                    (fd - an).abs() <= 1e-7 * (1.0 + fd.abs()),
                    "ray {r} sample {i}: fd {fd} vs {an}"
                );
            }
        }
    }

    fn checkerboard(side: usize, phase: usize) -> Image<f64> {
        // Tile size 6 does not divide the embedding's 8-pixel cells, so a
        // phase shift changes the per-cell statistics.
        let mut img = Image::new(side, side);
        for y in 0..side {
            for x in 0..side {
                let v = if ((x + 3 * phase) / 6 + y / 6) % 2 == 0 { 0.9 } else { 0.1 };
                img.set(x, y, [v, v, v]);
            }
        }
        img
    }

    #[test]
    fn msc_zero_on_identical_images() {
        let img = checkerboard(48, 0);
        let provider = BuiltinEmbedding::default();
        let l = msc_loss(&img, &img, &provider, false).unwrap();
        assert!(l.value.abs() < 1e-12);
        for s in &l.similarities {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn msc_detects_shifted_checkerboard() {
        let a = checkerboard(48, 0);
        let b = checkerboard(48, 1);
        let provider = BuiltinEmbedding::default();
        let l = msc_loss(&a, &b, &provider, false).unwrap();
        assert!(l.value > 1e-3, "shifted checkerboard should not be similar");
        for s in &l.similarities {
            assert!(*s < 1.0);
        }
    }

    #[test]
    fn msc_hits_two_per_level_on_anti_aligned_embeddings() {
        // A provider whose embeddings are exactly negated between an all-white
        // and an all-black image gives cosine -1 at every level, so each level
        // contributes 2.
        struct Centered;
        impl EmbeddingProvider<f64> for Centered {
            fn input_size(&self) -> usize {
                8
            }
            fn min_crop(&self) -> usize {
                1
            }
            fn crop_fractions(&self) -> &[f64] {
                &[0.5, 1.0]
            }
            fn embed(&self, image: &Image<f64>) -> Vec<f64> {
                let mean = image.data().iter().sum::<f64>() / image.data().len() as f64;
                vec![mean - 0.5, (mean - 0.5) * 2.0]
            }
            fn embed_backward(&self, _: &Image<f64>, _: &[f64]) -> Option<Image<f64>> {
                None
            }
        }
        let bright = Image::filled(16, 16, [1.0f64, 1.0, 1.0]);
        let dark = Image::filled(16, 16, [0.0f64, 0.0, 0.0]);
        let l = msc_loss(&bright, &dark, &Centered, false).unwrap();
        let levels = 2.0;
        assert!((l.value - 2.0 * levels).abs() < 1e-12, "loss = {}", l.value);
    }

    #[test]
    fn msc_crop_below_minimum_is_config_error() {
        let img = checkerboard(8, 0);
        let provider = BuiltinEmbedding::default(); // min crop 4; 1/3 of 8 -> 3
        assert!(matches!(
            msc_loss(&img, &img, &provider, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn builtin_embedding_constant_image() {
        let provider = BuiltinEmbedding::default();
        let img = Image::filled(32, 32, [0.6f64, 0.3, 0.1]);
        let raw = provider.raw_features(&img);
        for cell in raw.chunks_exact(6) {
            assert!((cell[0] - 0.6).abs() < 1e-12);
            assert!((cell[1] - 0.3).abs() < 1e-12);
            assert!((cell[2] - 0.1).abs() < 1e-12);
            assert_eq!(&cell[3..6], &[0.0, 0.0, 0.0]);
        }
        let f: Vec<f64> = provider.embed(&img);
        let norm: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn builtin_embedding_unit_norm_and_translation_sensitivity() {
        let provider = BuiltinEmbedding::default();
        let a = checkerboard(32, 0);
        let b = checkerboard(32, 1);
        let ea: Vec<f64> = provider.embed(&a);
        let eb: Vec<f64> = provider.embed(&b);
        let na: f64 = ea.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((na - 1.0).abs() < 1e-12);
        let (sim, _) = cosine_and_grad(&ea, &eb);
        assert!(sim < 1.0 - 1e-6, "shifted pattern must not embed identically");
    }

    #[test]
    fn external_embedding_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.f32");
        let values = [0.25f32, -1.5, 3.25, 0.0];
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&path, bytes).unwrap();
        let loaded = load_embedding_file(&path).unwrap();
        assert_eq!(loaded, values);
        assert!((embedding_similarity(&loaded, &loaded).unwrap() - 1.0).abs() < 1e-12);
    }
}
