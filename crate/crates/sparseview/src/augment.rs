//! Pseudo-view augmentation: forward-warp each input view to a grid of
//! perturbed poses using its depth map, scattering colors bilinearly into a
//! z-buffered accumulator.
//!
//! Warped pixels that receive too little scattered weight are holes and stay
//! invalid; downstream losses skip them instead of inpainting. A saliency
//! mask rides along with the colors so the photometric loss can split
//! foreground from background in the warped views too.

use crate::geometry::{compose_relative, pose_grid, Intrinsics, Pose, RigidTransform};
use crate::parallel;
use crate::raster::{DepthMap, Image, Mask};
use crate::{Error, Result};

/// A warped view: colors, validity, saliency, and the synthetic pose.
#[derive(Debug, Clone)]
pub struct PseudoView {
    pub image: Image<f32>,
    pub validity: Mask,
    pub saliency: Mask,
    pub pose: Pose,
    /// Index of the input view this was warped from.
    pub source_id: usize,
}

impl PseudoView {
    pub fn hole_fraction(&self) -> f64 {
        1.0 - self.validity.fraction_true()
    }
}

/// How scattering resolves several sources landing on one target pixel.
#[derive(Debug, Clone, Copy)]
pub struct ConflictPolicy {
    /// Contributions within `(1 + band) * nearest_depth` are blended;
    /// anything farther is occluded and dropped.
    pub depth_band: f64,
    /// Minimum accumulated bilinear weight for a target pixel to be valid.
    pub min_weight: f64,
}

impl Default for ConflictPolicy {
    fn default() -> Self {
        Self {
            depth_band: 0.01,
            min_weight: 0.25,
        }
    }
}

/// Counters reported by a warp.
#[derive(Debug, Clone, Copy, Default)]
pub struct WarpStats {
    pub source_pixels: usize,
    pub dropped_behind_camera: usize,
    pub dropped_out_of_frame: usize,
    pub holes: usize,
}

/// Back-project a pixel at `depth`, move it through `transform`, and
/// re-project. Returns the continuous target pixel and its new z-depth, or
/// `None` when the point ends up behind the destination camera.
pub fn warp_pixel(
    u: f64,
    v: f64,
    depth: f64,
    camera: &Intrinsics,
    transform: &RigidTransform,
) -> Result<Option<(f64, f64, f64)>> {
    if !(depth > 0.0) {
        return Err(Error::Domain(format!("depth {depth} must be positive")));
    }
    let p_src = camera.back_project(u, v, depth);
    let p_dst = transform.apply(&p_src);
    Ok(camera.project(&p_dst))
}

/// Per-target-pixel scattering state: blended color and saliency mass, total
/// bilinear weight, and the nearest depth seen so far.
#[derive(Debug, Clone)]
pub struct ScatterAccumulator {
    width: usize,
    height: usize,
    color: Vec<[f64; 3]>,
    saliency: Vec<f64>,
    weight: Vec<f64>,
    min_depth: Vec<f64>,
    band: f64,
}

impl ScatterAccumulator {
    pub fn new(width: usize, height: usize, band: f64) -> Self {
        Self {
            width,
            height,
            color: vec![[0.0; 3]; width * height],
            saliency: vec![0.0; width * height],
            weight: vec![0.0; width * height],
            min_depth: vec![f64::INFINITY; width * height],
            band,
        }
    }

    fn keep_nearest(&mut self, idx: usize, depth: f64) {
        if depth < self.min_depth[idx] {
            self.min_depth[idx] = depth;
        }
    }

    fn deposit(&mut self, idx: usize, w: f64, rgb: [f32; 3], salient: bool, depth: f64) {
        // Second pass: only contributions inside the depth band survive.
        if depth > self.min_depth[idx] * (1.0 + self.band) {
            return;
        }
        self.weight[idx] += w;
        for c in 0..3 {
            self.color[idx][c] += w * rgb[c] as f64;
        }
        if salient {
            self.saliency[idx] += w;
        }
    }

    fn finalize(self, min_weight: f64) -> (Image<f32>, Mask, Mask, usize) {
        let mut image = Image::new(self.width, self.height);
        let mut validity = Mask::filled(self.width, self.height, false);
        let mut saliency = Mask::filled(self.width, self.height, false);
        let mut holes = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                let idx = y * self.width + x;
                let w = self.weight[idx];
                if w < min_weight {
                    holes += 1;
                    continue;
                }
                validity.set(x, y, true);
                let rgb = [
                    (self.color[idx][0] / w) as f32,
                    (self.color[idx][1] / w) as f32,
                    (self.color[idx][2] / w) as f32,
                ];
                image.set(x, y, rgb);
                saliency.set(x, y, self.saliency[idx] / w >= 0.5);
            }
        }
        (image, validity, saliency, holes)
    }
}

struct Splat {
    u: f64,
    v: f64,
    depth: f64,
    rgb: [f32; 3],
    salient: bool,
}

/// Forward-warp `source` through `transform`.
///
/// Every valid source pixel scatters its color to the four integer neighbors
/// of its continuous target position with bilinear weights. Depth conflicts
/// resolve to the nearest contribution, blending within the policy's
/// tolerance band. Target pixels with accumulated weight below the policy
/// minimum are holes.
pub fn forward_warp(
    source: &Image<f32>,
    depth: &DepthMap,
    saliency: &Mask,
    camera: &Intrinsics,
    transform: &RigidTransform,
    policy: &ConflictPolicy,
) -> Result<(PseudoView, WarpStats)> {
    let (w, h) = (source.width(), source.height());
    if depth.width() != w || depth.height() != h {
        return Err(Error::Contract(format!(
            "depth map {}x{} does not match image {w}x{h}",
            depth.width(),
            depth.height()
        )));
    }
    if saliency.width() != w || saliency.height() != h {
        return Err(Error::Contract("saliency mask size mismatch".into()));
    }
    if camera.width != w || camera.height != h {
        return Err(Error::Contract("camera size does not match image".into()));
    }

    let mut stats = WarpStats {
        source_pixels: w * h,
        ..WarpStats::default()
    };

    // Project every source pixel once, in raster order.
    let mut splats = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let Some(d) = depth.get(x, y) else {
                stats.source_pixels -= 1;
                continue;
            };
            match warp_pixel(x as f64, y as f64, d, camera, transform)? {
                None => stats.dropped_behind_camera += 1,
                Some((u, v, target_depth)) => {
                    if u <= -1.0 || v <= -1.0 || u >= w as f64 || v >= h as f64 {
                        stats.dropped_out_of_frame += 1;
                        continue;
                    }
                    // Snap sub-ulp residue from the project/back-project
                    // cycle so an identity transform scatters with weight
                    // exactly one.
                    let snap = |t: f64| {
                        let r = t.round();
                        if (t - r).abs() < 1e-9 {
                            r
                        } else {
                            t
                        }
                    };
                    splats.push(Splat {
                        u: snap(u),
                        v: snap(v),
                        depth: target_depth,
                        rgb: source.get(x, y),
                        salient: saliency.get(x, y),
                    });
                }
            }
        }
    }

    let mut acc = ScatterAccumulator::new(w, h, policy.depth_band);
    let taps = |s: &Splat| {
        let x0 = s.u.floor();
        let y0 = s.v.floor();
        let fx = s.u - x0;
        let fy = s.v - y0;
        [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1.0, y0, fx * (1.0 - fy)),
            (x0, y0 + 1.0, (1.0 - fx) * fy),
            (x0 + 1.0, y0 + 1.0, fx * fy),
        ]
    };
    // Pass 1: nearest depth per target pixel.
    for s in &splats {
        for (tx, ty, tw) in taps(s) {
            if tw <= 0.0 || tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                continue;
            }
            acc.keep_nearest(ty as usize * w + tx as usize, s.depth);
        }
    }
    // Pass 2: blend contributions that survive the z test, in raster order.
    for s in &splats {
        for (tx, ty, tw) in taps(s) {
            if tw <= 0.0 || tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                continue;
            }
            acc.deposit(ty as usize * w + tx as usize, tw, s.rgb, s.salient, s.depth);
        }
    }

    let (image, validity, saliency, holes) = acc.finalize(policy.min_weight);
    stats.holes = holes;
    Ok((
        PseudoView {
            image,
            validity,
            saliency,
            pose: Pose::identity(), // callers overwrite with the target pose
            source_id: 0,
        },
        stats,
    ))
}

/// One input view ready for augmentation.
#[derive(Debug, Clone)]
pub struct SourceView {
    pub image: Image<f32>,
    pub depth: DepthMap,
    pub pose: Pose,
}

/// Background classification rule for depth-based saliency.
#[derive(Debug, Clone, Copy)]
pub enum BackgroundRule {
    /// Foreground wherever depth is valid; holes in the depth map are
    /// background (suits synthetic scenes with empty backdrops).
    FiniteDepth,
    /// Foreground where depth is below a fixed distance.
    FixedThreshold(f64),
    /// Foreground where depth is below the given percentile (0..=100) of
    /// valid depths.
    Percentile(f64),
}

/// Depth-based foreground mask. Returns the mask and a degeneracy flag set
/// when every valid depth is identical (mask falls back to all-foreground).
pub fn saliency_from_depth(depth: &DepthMap, rule: BackgroundRule) -> (Mask, bool) {
    let (w, h) = (depth.width(), depth.height());
    let mut valid_depths: Vec<f64> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = depth.get(x, y) {
                valid_depths.push(d);
            }
        }
    }
    let degenerate = match (valid_depths.first(), valid_depths.last()) {
        (Some(_), Some(_)) => {
            let min = valid_depths.iter().copied().fold(f64::INFINITY, f64::min);
            let max = valid_depths.iter().copied().fold(0.0, f64::max);
            max - min < 1e-12 && matches!(rule, BackgroundRule::Percentile(_))
        }
        _ => false,
    };

    let threshold = match rule {
        BackgroundRule::FiniteDepth => f64::INFINITY,
        BackgroundRule::FixedThreshold(t) => t,
        BackgroundRule::Percentile(p) => {
            if valid_depths.is_empty() || degenerate {
                f64::INFINITY
            } else {
                let mut sorted = valid_depths.clone();
                sorted.sort_by(|a, b| a.total_cmp(b));
                let idx = ((sorted.len() - 1) as f64 * (p / 100.0).clamp(0.0, 1.0)).round();
                sorted[idx as usize]
            }
        }
    };

    let mut mask = Mask::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = depth.get(x, y) {
                mask.set(x, y, d < threshold || matches!(rule, BackgroundRule::FiniteDepth));
            }
        }
    }
    (mask, degenerate)
}

/// Saliency source: a depth rule or externally supplied per-view masks.
#[derive(Debug, Clone)]
pub enum SaliencyProvider {
    Depth(BackgroundRule),
    /// One precomputed mask per input view, passed through unchanged.
    External(Vec<Mask>),
}

impl SaliencyProvider {
    fn mask_for(&self, view_index: usize, depth: &DepthMap) -> Result<Mask> {
        match self {
            SaliencyProvider::Depth(rule) => Ok(saliency_from_depth(depth, *rule).0),
            SaliencyProvider::External(masks) => masks.get(view_index).cloned().ok_or_else(|| {
                Error::Contract(format!("no external saliency mask for view {view_index}"))
            }),
        }
    }
}

/// Summary statistics for a batch of generated pseudo-views.
#[derive(Debug, Clone, Default)]
pub struct AugmentStats {
    pub views: usize,
    pub mean_hole_fraction: f64,
    pub per_view_hole_fraction: Vec<f64>,
}

/// Generate the full pseudo-view set: every input view warped to every pose
/// of its `[-alpha, +alpha]` rotation grid.
///
/// A failed warp never aborts the batch; it only invalidates pixels.
pub fn generate_pseudo_views(
    inputs: &[SourceView],
    camera: &Intrinsics,
    alpha_deg: f64,
    step_deg: f64,
    saliency: &SaliencyProvider,
    policy: &ConflictPolicy,
) -> Result<(Vec<PseudoView>, AugmentStats)> {
    if inputs.is_empty() {
        return Err(Error::Contract("need at least one input view".into()));
    }
    // Pre-compute per-source saliency masks and pose grids.
    let mut jobs = Vec::new();
    for (i, view) in inputs.iter().enumerate() {
        let mask = saliency.mask_for(i, &view.depth)?;
        for pose in pose_grid(&view.pose, alpha_deg, step_deg)? {
            jobs.push((i, pose, mask.clone()));
        }
    }

    let results: Vec<Result<PseudoView>> = parallel::ordered_map(jobs.len(), |j| {
        let (src_idx, target_pose, mask) = &jobs[j];
        let view = &inputs[*src_idx];
        let transform = compose_relative(&view.pose, target_pose);
        let (mut pv, _stats) =
            forward_warp(&view.image, &view.depth, mask, camera, &transform, policy)?;
        pv.pose = *target_pose;
        pv.source_id = *src_idx;
        Ok(pv)
    });

    let mut views = Vec::with_capacity(results.len());
    let mut per_view_hole_fraction = Vec::with_capacity(results.len());
    for r in results {
        let pv = r?;
        per_view_hole_fraction.push(pv.hole_fraction());
        views.push(pv);
    }
    let mean_hole_fraction = if per_view_hole_fraction.is_empty() {
        0.0
    } else {
        per_view_hole_fraction.iter().sum::<f64>() / per_view_hole_fraction.len() as f64
    };
    Ok((
        views,
        AugmentStats {
            views: per_view_hole_fraction.len(),
            mean_hole_fraction,
            per_view_hole_fraction,
        },
    ))
}

// --- cache directory -------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheManifest {
    version: u32,
    alpha: f64,
    step: f64,
    views: Vec<CacheView>,
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheView {
    index: usize,
    source_id: usize,
    rgb: String,
    validity: String,
    saliency: String,
    hole_fraction: f64,
    transform: Vec<f64>,
}

const CACHE_VERSION: u32 = 1;

/// Write pseudo-views as a cache directory: RGB, validity, and saliency
/// files per view plus a manifest listing poses and hole fractions.
pub fn save_pseudo_views(
    dir: &std::path::Path,
    views: &[PseudoView],
    alpha_deg: f64,
    step_deg: f64,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(views.len());
    for (i, pv) in views.iter().enumerate() {
        let rgb = format!("pv_{i:06}_rgb.png");
        let validity = format!("pv_{i:06}_valid.png");
        let saliency = format!("pv_{i:06}_sal.png");
        crate::dataio::write_image(&dir.join(&rgb), &pv.image)?;
        crate::dataio::write_mask(&dir.join(&validity), &pv.validity)?;
        crate::dataio::write_mask(&dir.join(&saliency), &pv.saliency)?;
        records.push(CacheView {
            index: i,
            source_id: pv.source_id,
            rgb,
            validity,
            saliency,
            hole_fraction: pv.hole_fraction(),
            transform: pv.pose.to_matrix4().into_iter().flatten().collect(),
        });
    }
    let manifest = CacheManifest {
        version: CACHE_VERSION,
        alpha: alpha_deg,
        step: step_deg,
        views: records,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("cache manifest: {e}")))?;
    let path = dir.join("manifest.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Read a cache directory produced by [`save_pseudo_views`].
pub fn load_pseudo_views(dir: &std::path::Path) -> Result<Vec<PseudoView>> {
    let path = dir.join("manifest.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CacheManifest =
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if manifest.version != CACHE_VERSION {
        return Err(Error::Data(format!(
            "{}: cache version {} unsupported",
            path.display(),
            manifest.version
        )));
    }
    let mut views = Vec::with_capacity(manifest.views.len());
    for record in &manifest.views {
        if record.transform.len() != 16 {
            return Err(Error::Data(format!(
                "cache view {}: transform needs 16 entries",
                record.index
            )));
        }
        let mut m = [[0.0; 4]; 4];
        for r in 0..4 {
            for c in 0..4 {
                m[r][c] = record.transform[r * 4 + c];
            }
        }
        views.push(PseudoView {
            image: crate::dataio::read_image(&dir.join(&record.rgb), [0.0; 3])?,
            validity: crate::dataio::read_mask(&dir.join(&record.validity))?,
            saliency: crate::dataio::read_mask(&dir.join(&record.saliency))?,
            pose: Pose::from_matrix4(&m)?,
            source_id: record.source_id,
        });
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn camera() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn textured_source(w: usize, h: usize, depth_value: f32) -> SourceView {
        let mut image = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                image.set(
                    x,
                    y,
                    [
                        (x as f32) / w as f32,
                        (y as f32) / h as f32,
                        ((x + y) % 7) as f32 / 7.0,
                    ],
                );
            }
        }
        let depth = DepthMap::from_data(w, h, vec![depth_value; w * h]).unwrap();
        SourceView {
            image,
            depth,
            pose: Pose::identity(),
        }
    }

    #[test]
    fn warp_pixel_identity() {
        let t = RigidTransform::identity();
        let (u, v, d) = warp_pixel(23.0, 41.0, 2.5, &camera(), &t).unwrap().unwrap();
        assert!((u - 23.0).abs() < 1e-12);
        assert!((v - 41.0).abs() < 1e-12);
        assert!((d - 2.5).abs() < 1e-12);
    }

    #[test]
    fn warp_pixel_hand_translation() {
        // Camera-frame shift of +0.1 in x at depth 2 moves the principal
        // pixel by fx * 0.1 / 2 = 5 pixels.
        let t = RigidTransform {
            rotation: nalgebra::Matrix3::identity(),
            translation: Vector3::new(0.1, 0.0, 0.0),
        };
        let (u, v, d) = warp_pixel(50.0, 50.0, 2.0, &camera(), &t).unwrap().unwrap();
        assert!((u - 55.0).abs() < 1e-12);
        assert!((v - 50.0).abs() < 1e-12);
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn warp_pixel_halving_depth_doubles_offset() {
        // Moving the camera toward the scene so depth halves doubles the
        // offset from the principal point (similar triangles). The -z
        // convention means moving forward is translating by -1 in z.
        let t = RigidTransform {
            rotation: nalgebra::Matrix3::identity(),
            translation: Vector3::new(0.0, 0.0, 1.0),
        };
        let (u0, _, d0) = warp_pixel(60.0, 50.0, 2.0, &camera(), &RigidTransform::identity())
            .unwrap()
            .unwrap();
        let (u1, _, d1) = warp_pixel(60.0, 50.0, 2.0, &camera(), &t).unwrap().unwrap();
        assert!((d0 - 2.0).abs() < 1e-12);
        assert!((d1 - 1.0).abs() < 1e-12);
        assert!(((u1 - 50.0) - 2.0 * (u0 - 50.0)).abs() < 1e-12);
    }

    #[test]
    fn warp_pixel_behind_camera_dropped() {
        // +z translation pushes the point past the camera (it looks along -z).
        let t = RigidTransform {
            rotation: nalgebra::Matrix3::identity(),
            translation: Vector3::new(0.0, 0.0, 5.0),
        };
        assert!(warp_pixel(50.0, 50.0, 2.0, &camera(), &t).unwrap().is_none());
    }

    #[test]
    fn identity_warp_reproduces_source() {
        let src = textured_source(100, 100, 3.0);
        let mask = Mask::filled(100, 100, true);
        let (pv, stats) = forward_warp(
            &src.image,
            &src.depth,
            &mask,
            &camera(),
            &RigidTransform::identity(),
            &ConflictPolicy::default(),
        )
        .unwrap();
        assert_eq!(stats.holes, 0);
        assert_eq!(pv.validity.count_true(), 100 * 100);
        for (a, b) in pv.image.data().iter().zip(src.image.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "identity warp must be exact");
        }
        assert_eq!(pv.saliency.count_true(), 100 * 100);
    }

    #[test]
    fn constant_translation_preserves_interior_and_opens_border_holes() {
        let w = 64;
        let mut image = Image::new(w, w);
        for y in 0..w {
            for x in 0..w {
                image.set(x, y, [0.3, 0.6, 0.9]);
            }
        }
        let depth = DepthMap::from_data(w, w, vec![2.0; w * w]).unwrap();
        let mask = Mask::filled(w, w, true);
        // 0.1 world units at depth 2 with fx = 64 is a 3.2 px shift.
        let t = RigidTransform {
            rotation: nalgebra::Matrix3::identity(),
            translation: Vector3::new(0.1, 0.0, 0.0),
        };
        let cam = Intrinsics::new(64.0, 64.0, 32.0, 32.0, w, w).unwrap();
        let (pv, stats) =
            forward_warp(&image, &depth, &mask, &cam, &t, &ConflictPolicy::default()).unwrap();
        assert!(stats.holes > 0, "newly exposed border must be holes");
        for y in 0..w {
            for x in 0..w {
                if pv.validity.get(x, y) {
                    let p = pv.image.get(x, y);
                    assert!((p[0] - 0.3).abs() < 1e-6);
                    assert!((p[1] - 0.6).abs() < 1e-6);
                    assert!((p[2] - 0.9).abs() < 1e-6);
                }
            }
        }
        // Left band is newly exposed (scene moved right), so it has holes.
        assert!(!pv.validity.get(0, 32));
        assert!(pv.validity.get(32, 32));
    }

    #[test]
    fn nearer_pixel_wins_depth_conflict() {
        // Two source pixels that land on the same target: a red one at depth
        // 1 and a green one at depth 4. The z-buffer must keep red.
        //
        // Pixel (2, 4) at depth 1 back-projects to (-0.25, 0, -1); pixel
        // (6, 4) at depth 4 to (1, 0, -4). Translating by (2/3, 0, 0) sends
        // both to u = 4 + 8 * (5/12) = 7.333, v = 4.
        let w = 8;
        let cam = Intrinsics::new(8.0, 8.0, 4.0, 4.0, w, w).unwrap();
        let mut image = Image::new(w, w);
        image.set(2, 4, [1.0, 0.0, 0.0]);
        image.set(6, 4, [0.0, 1.0, 0.0]);
        let mut depth = DepthMap::invalid(w, w);
        depth.set(2, 4, 1.0);
        depth.set(6, 4, 4.0);
        let t = RigidTransform {
            rotation: nalgebra::Matrix3::identity(),
            translation: Vector3::new(2.0 / 3.0, 0.0, 0.0),
        };
        let (ua, va, da) = warp_pixel(2.0, 4.0, 1.0, &cam, &t).unwrap().unwrap();
        let (ub, vb, db) = warp_pixel(6.0, 4.0, 4.0, &cam, &t).unwrap().unwrap();
        assert!((ua - ub).abs() < 1e-12 && (va - vb).abs() < 1e-12);
        assert!((da - 1.0).abs() < 1e-12 && (db - 4.0).abs() < 1e-12);

        let mut saliency = Mask::filled(w, w, false);
        saliency.set(2, 4, true);
        let (pv, _) = forward_warp(
            &image,
            &depth,
            &saliency,
            &cam,
            &t,
            &ConflictPolicy {
                depth_band: 0.01,
                min_weight: 0.25,
            },
        )
        .unwrap();
        let tx = ua.floor() as usize;
        assert!(pv.validity.get(tx, 4), "target pixel must be valid");
        let p = pv.image.get(tx, 4);
        assert_eq!(p, [1.0, 0.0, 0.0], "nearest contribution must win");
        assert!(pv.saliency.get(tx, 4), "saliency rides with the winner");
    }

    #[test]
    fn blending_inside_depth_band() {
        let mut acc = ScatterAccumulator::new(1, 1, 0.05);
        acc.keep_nearest(0, 2.0);
        acc.keep_nearest(0, 2.02); // within 1% band around 2.0 at 5% tolerance
        acc.deposit(0, 1.0, [1.0, 0.0, 0.0], false, 2.0);
        acc.deposit(0, 1.0, [0.0, 1.0, 0.0], false, 2.02);
        let (img, _, _, _) = acc.finalize(0.25);
        let p = img.get(0, 0);
        assert!((p[0] - 0.5).abs() < 1e-6);
        assert!((p[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn pseudo_view_counts_match_grid() {
        let src = textured_source(16, 16, 2.0);
        let cam = Intrinsics::new(16.0, 16.0, 8.0, 8.0, 16, 16).unwrap();
        let provider = SaliencyProvider::Depth(BackgroundRule::FiniteDepth);
        let (views, stats) = generate_pseudo_views(
            &[src.clone(), src],
            &cam,
            5.0,
            5.0,
            &provider,
            &ConflictPolicy::default(),
        )
        .unwrap();
        assert_eq!(views.len(), 2 * 26);
        assert_eq!(stats.views, 52);
        assert_eq!(stats.per_view_hole_fraction.len(), 52);
        let recount = views.iter().map(|v| v.hole_fraction()).sum::<f64>() / 52.0;
        assert!((stats.mean_hole_fraction - recount).abs() < 1e-12);
    }

    #[test]
    fn saliency_rules() {
        let mut depth = DepthMap::invalid(4, 4);
        depth.set(1, 1, 2.0);
        depth.set(2, 2, 8.0);
        let (mask, degenerate) = saliency_from_depth(&depth, BackgroundRule::FiniteDepth);
        assert!(!degenerate);
        assert_eq!(mask.count_true(), 2);

        let (mask, _) = saliency_from_depth(&depth, BackgroundRule::FixedThreshold(5.0));
        assert!(mask.get(1, 1));
        assert!(!mask.get(2, 2));

        // All-invalid depth: empty foreground under the finite rule.
        let empty = DepthMap::invalid(4, 4);
        let (mask, _) = saliency_from_depth(&empty, BackgroundRule::FiniteDepth);
        assert_eq!(mask.count_true(), 0);

        // Degenerate constant depth with a percentile rule: all-foreground
        // plus the warning flag.
        let flat = DepthMap::from_data(2, 2, vec![3.0; 4]).unwrap();
        let (mask, degenerate) = saliency_from_depth(&flat, BackgroundRule::Percentile(50.0));
        assert!(degenerate);
        assert_eq!(mask.count_true(), 4);
    }

    #[test]
    fn cache_round_trip() {
        let src = textured_source(16, 16, 2.0);
        let cam = Intrinsics::new(16.0, 16.0, 8.0, 8.0, 16, 16).unwrap();
        let provider = SaliencyProvider::Depth(BackgroundRule::FiniteDepth);
        let (mut views, _) = generate_pseudo_views(
            &[src],
            &cam,
            5.0,
            5.0,
            &provider,
            &ConflictPolicy::default(),
        )
        .unwrap();
        views.truncate(3);
        // PNG stores 8 bits; quantize first so the comparison is exact.
        for v in &mut views {
            v.image.quantize_u8();
        }
        let dir = tempfile::tempdir().unwrap();
        save_pseudo_views(dir.path(), &views, 5.0, 5.0).unwrap();
        let loaded = load_pseudo_views(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in loaded.iter().zip(&views) {
            assert_eq!(a.source_id, b.source_id);
            assert_eq!(a.validity, b.validity);
            assert_eq!(a.saliency, b.saliency);
            assert!((a.pose.rotation() - b.pose.rotation()).abs().max() < 1e-15);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn external_masks_pass_through() {
        let mut external = Mask::filled(16, 16, false);
        external.set(3, 3, true);
        let provider = SaliencyProvider::External(vec![external.clone()]);
        let depth = DepthMap::from_data(16, 16, vec![1.0; 256]).unwrap();
        let got = provider.mask_for(0, &depth).unwrap();
        assert_eq!(got, external);
        assert!(provider.mask_for(1, &depth).is_err());
    }
}
