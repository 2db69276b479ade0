//! Pixel buffers shared across the crate: RGB images, boolean masks, and
//! depth maps, plus the crop/resize primitives the loss pipeline
//! differentiates through.
//!
//! Images are interleaved RGB, row-major from the top-left, channels in
//! `[0, 1]`. Depth maps store z-depth (distance along the optical axis) as
//! f32 with non-finite or non-positive entries meaning "no depth".

use crate::{real::real, Error, Real, Result};

/// Interleaved RGB image, generic over scalar so losses can be checked in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<F> {
    width: usize,
    height: usize,
    data: Vec<F>,
}

impl<F: Real> Image<F> {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![F::zero(); width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Contract(format!(
                "image buffer length {} != {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [F; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [F; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [F; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn npixels(&self) -> usize {
        self.width * self.height
    }

    pub fn cast<G: Real>(&self) -> Image<G> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| real(v.to_f64_lossy())).collect(),
        }
    }

    /// Center crop of `size` x `size` pixels.
    pub fn center_crop(&self, size: usize) -> Result<Image<F>> {
        if size == 0 || size > self.width || size > self.height {
            return Err(Error::Config(format!(
                "crop {size} out of range for {}x{} image",
                self.width, self.height
            )));
        }
        let x0 = (self.width - size) / 2;
        let y0 = (self.height - size) / 2;
        let mut out = Image::new(size, size);
        for y in 0..size {
            let src = ((y0 + y) * self.width + x0) * 3;
            let dst = y * size * 3;
            out.data[dst..dst + size * 3].copy_from_slice(&self.data[src..src + size * 3]);
        }
        Ok(out)
    }

    /// Scatter a crop-shaped gradient back to full-image coordinates.
    pub fn center_crop_backward(&self, grad: &Image<F>) -> Image<F> {
        let size = grad.width;
        let x0 = (self.width - size) / 2;
        let y0 = (self.height - size) / 2;
        let mut out = Image::new(self.width, self.height);
        for y in 0..size {
            let dst = ((y0 + y) * self.width + x0) * 3;
            let src = y * size * 3;
            out.data[dst..dst + size * 3].copy_from_slice(&grad.data[src..src + size * 3]);
        }
        out
    }

    /// Average-pool by integer factor; used to build reduced-resolution
    /// references deterministically.
    pub fn downsample_box(&self, factor: usize) -> Result<Image<F>> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Config(format!(
                "box factor {factor} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let inv = real::<F>(1.0 / (factor * factor) as f64);
        let mut out = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [F::zero(); 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.get(x * factor + dx, y * factor + dy);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                out.set(x, y, [acc[0] * inv, acc[1] * inv, acc[2] * inv]);
            }
        }
        Ok(out)
    }

    /// Luma plane using Rec. 601 weights (0.299, 0.587, 0.114).
    pub fn luma(&self) -> Vec<F> {
        let (wr, wg, wb) = (real::<F>(0.299), real::<F>(0.587), real::<F>(0.114));
        self.data
            .chunks_exact(3)
            .map(|p| p[0] * wr + p[1] * wg + p[2] * wb)
            .collect()
    }

    /// Quantize channels to the 8-bit grid; file round-trips become exact.
    pub fn quantize_u8(&mut self) {
        let scale = real::<F>(255.0);
        for v in &mut self.data {
            let q = (*v * scale).round() / scale;
            *v = q.max(F::zero()).min(F::one());
        }
    }
}

/// Sampling footprint of one bilinear tap: 4 corner indices and weights.
#[derive(Debug, Clone, Copy)]
struct BilinearTap {
    idx: [usize; 4],
    w: [f64; 4],
}

fn bilinear_tap(width: usize, height: usize, x: f64, y: f64) -> BilinearTap {
    let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64 - 1.0);
    let x = clamp(x, width);
    let y = clamp(y, height);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    BilinearTap {
        idx: [
            y0 * width + x0,
            y0 * width + x1,
            y1 * width + x0,
            y1 * width + x1,
        ],
        w: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    }
}

/// Bilinear resample to `out_w` x `out_h` with half-pixel-centered mapping.
pub fn resize_bilinear<F: Real>(src: &Image<F>, out_w: usize, out_h: usize) -> Image<F> {
    let sx = src.width as f64 / out_w as f64;
    let sy = src.height as f64 / out_h as f64;
    let mut out = Image::new(out_w, out_h);
    for oy in 0..out_h {
        let y = (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..out_w {
            let x = (ox as f64 + 0.5) * sx - 0.5;
            let tap = bilinear_tap(src.width, src.height, x, y);
            let mut acc = [F::zero(); 3];
            for k in 0..4 {
                let w = real::<F>(tap.w[k]);
                let i = tap.idx[k] * 3;
                for c in 0..3 {
                    acc[c] += src.data[i + c] * w;
                }
            }
            out.set(ox, oy, acc);
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: scatter an output-shaped gradient back to
/// source-image coordinates.
pub fn resize_bilinear_backward<F: Real>(
    src_w: usize,
    src_h: usize,
    grad_out: &Image<F>,
) -> Image<F> {
    let sx = src_w as f64 / grad_out.width as f64;
    let sy = src_h as f64 / grad_out.height as f64;
    let mut grad_src = Image::new(src_w, src_h);
    for oy in 0..grad_out.height {
        let y = (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..grad_out.width {
            let x = (ox as f64 + 0.5) * sx - 0.5;
            let tap = bilinear_tap(src_w, src_h, x, y);
            let g = grad_out.get(ox, oy);
            for k in 0..4 {
                let w = real::<F>(tap.w[k]);
                let i = tap.idx[k] * 3;
                for c in 0..3 {
                    grad_src.data_mut()[i + c] += g[c] * w;
                }
            }
        }
    }
    grad_src
}

/// Per-pixel boolean mask (validity, saliency, silhouettes).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Contract(format!(
                "mask buffer length {} != {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction_true(&self) -> f64 {
        self.count_true() as f64 / self.data.len().max(1) as f64
    }
}

/// Z-depth map in world units; entries that are non-finite or <= 0 are holes.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![f32::INFINITY; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Contract(format!(
                "depth buffer length {} != {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn raw(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Depth if the pixel holds a usable value.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let v = self.raw(x, y);
        (v.is_finite() && v > 0.0).then_some(v as f64)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn validity(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| v.is_finite() && v > 0.0)
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image<f64> {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = (x + y * w) as f64 / (w * h) as f64;
                img.set(x, y, [v, 1.0 - v, 0.5 * v]);
            }
        }
        img
    }

    #[test]
    fn crop_sizes_follow_fractions() {
        let img = ramp(90, 90);
        for (frac, expect) in [(1.0f64 / 3.0, 30), (2.0 / 3.0, 60), (1.0, 90)] {
            let size = (90.0 * frac).round() as usize;
            assert_eq!(size, expect);
            let crop = img.center_crop(size).unwrap();
            assert_eq!(crop.width(), expect);
        }
    }

    #[test]
    fn resize_identity_is_exact() {
        let img = ramp(17, 9);
        let out = resize_bilinear(&img, 17, 9);
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = Image::filled(13, 11, [0.25f64, 0.5, 0.75]);
        let out = resize_bilinear(&img, 32, 32);
        for p in out.data().chunks_exact(3) {
            assert!((p[0] - 0.25).abs() < 1e-12);
            assert!((p[1] - 0.5).abs() < 1e-12);
            assert!((p[2] - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_backward_is_adjoint() {
        // <resize(x), g> == <x, resize_backward(g)> for linear maps.
        let src = ramp(12, 10);
        let mut g = Image::<f64>::new(7, 5);
        for (i, v) in g.data_mut().iter_mut().enumerate() {
            *v = ((i * 37 + 11) % 19) as f64 / 19.0 - 0.5;
        }
        let fwd = resize_bilinear(&src, 7, 5);
        let lhs: f64 = fwd.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let back = resize_bilinear_backward(12, 10, &g);
        let rhs: f64 = src.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn depth_holes_are_none() {
        let mut d = DepthMap::invalid(4, 4);
        assert_eq!(d.get(1, 1), None);
        d.set(1, 1, 2.5);
        assert_eq!(d.get(1, 1), Some(2.5));
        d.set(2, 2, -1.0);
        assert_eq!(d.get(2, 2), None);
    }
}
