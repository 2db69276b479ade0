//! Scene loading and saving, synthetic toy scenes, depth/mask/image file
//! formats, and image-quality metrics.
//!
//! Two manifest layouts are supported: the crate's native TOML manifest and
//! the "transforms" JSON layout common to synthetic NeRF datasets
//! (`camera_angle_x` plus per-frame 4x4 camera-to-world matrices). Depth maps
//! are PFM, masks are single-channel PNG, images are 8-bit PNG mapped
//! linearly to `[0, 1]`; no gamma handling is applied.

mod metrics;
mod pfm;
mod toy;

pub use metrics::{psnr, psnr_masked, ssim, ssim_masked, MetricReport, ViewMetrics};
pub use pfm::{read_pfm, write_pfm};
pub use toy::{generate_toy_scene, Primitive, ToySceneSpec};

use std::path::{Path, PathBuf};

use crate::geometry::{Intrinsics, Pose};
use crate::raster::{DepthMap, Image, Mask};
use crate::{Error, Result};

/// Which split a frame belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One posed frame with its decoded buffers.
#[derive(Debug, Clone)]
pub struct Frame {
    pub name: String,
    pub image: Image<f32>,
    pub depth: Option<DepthMap>,
    pub mask: Option<Mask>,
    pub pose: Pose,
    pub split: Split,
}

/// A fully decoded scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub camera: Intrinsics,
    pub frames: Vec<Frame>,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
}

impl Scene {
    pub fn frames_of(&self, split: Split) -> Vec<&Frame> {
        self.frames.iter().filter(|f| f.split == split).collect()
    }

    pub fn background_f32(&self) -> [f32; 3] {
        self.background.map(|v| v as f32)
    }
}

// --- native manifest (TOML) --------------------------------------------------

pub const MANIFEST_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    version: u32,
    camera: ManifestCamera,
    bounds: ManifestBounds,
    background: [f64; 3],
    #[serde(default)]
    frames: Vec<ManifestFrame>,
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestCamera {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestBounds {
    near: f64,
    far: f64,
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFrame {
    name: String,
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    depth: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    split: Split,
    /// Row-major 4x4 camera-to-world matrix, flattened.
    transform: Vec<f64>,
}

fn pose_from_flat(flat: &[f64], what: &str) -> Result<Pose> {
    if flat.len() != 16 {
        return Err(Error::Data(format!(
            "{what}: transform has {} entries, expected 16",
            flat.len()
        )));
    }
    let mut m = [[0.0; 4]; 4];
    for r in 0..4 {
        for c in 0..4 {
            m[r][c] = flat[r * 4 + c];
        }
    }
    Pose::from_matrix4(&m).map_err(|e| Error::Data(format!("{what}: {e}")))
}

/// Load a scene from a native TOML manifest or a transforms-layout JSON file,
/// decoding every referenced buffer.
pub fn load_scene(path: &Path) -> Result<Scene> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => load_transforms_json(path),
        Some("toml") => load_native(path),
        _ => Err(Error::Data(format!(
            "{}: unknown manifest type (expected .toml or .json)",
            path.display()
        ))),
    }
}

fn load_native(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ManifestDoc = toml::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if doc.version != MANIFEST_VERSION {
        return Err(Error::Data(format!(
            "{}: manifest version {} unsupported (expected {MANIFEST_VERSION})",
            path.display(),
            doc.version
        )));
    }
    let camera = Intrinsics::new(
        doc.camera.fx,
        doc.camera.fy,
        doc.camera.cx,
        doc.camera.cy,
        doc.camera.width,
        doc.camera.height,
    )?;
    if !(doc.bounds.near >= 0.0 && doc.bounds.near < doc.bounds.far) {
        return Err(Error::Data(format!(
            "{}: invalid bounds [{}, {}]",
            path.display(),
            doc.bounds.near,
            doc.bounds.far
        )));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut frames = Vec::with_capacity(doc.frames.len());
    for mf in &doc.frames {
        let at = |e: Error| Error::Data(format!("frame '{}': {e}", mf.name));
        let pose = pose_from_flat(&mf.transform, &format!("frame '{}'", mf.name))?;
        let image = read_image(&dir.join(&mf.image), doc.background).map_err(at)?;
        if image.width() != camera.width || image.height() != camera.height {
            return Err(Error::Data(format!(
                "frame '{}': image is {}x{}, camera expects {}x{}",
                mf.name,
                image.width(),
                image.height(),
                camera.width,
                camera.height
            )));
        }
        let depth = match &mf.depth {
            Some(rel) => {
                let d = read_pfm(&dir.join(rel)).map_err(at)?;
                if d.width() != camera.width || d.height() != camera.height {
                    return Err(Error::Data(format!(
                        "frame '{}': depth size mismatch",
                        mf.name
                    )));
                }
                Some(d)
            }
            None => None,
        };
        let mask = match &mf.mask {
            Some(rel) => Some(read_mask(&dir.join(rel)).map_err(at)?),
            None => None,
        };
        frames.push(Frame {
            name: mf.name.clone(),
            image,
            depth,
            mask,
            pose,
            split: mf.split,
        });
    }
    Ok(Scene {
        camera,
        frames,
        near: doc.bounds.near,
        far: doc.bounds.far,
        background: doc.background,
    })
}

/// Write a scene as a native manifest plus per-frame files under `dir`:
/// `images/*.png`, `depth/*.pfm`, `masks/*.png`, and `scene.toml`.
///
/// PNG stores 8 bits per channel; quantize images first (the toy generator
/// already does) if bit-exact round-trips matter.
pub fn save_scene(dir: &Path, scene: &Scene) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(scene.frames.len());
    for frame in &scene.frames {
        let image_rel = format!("images/{}.png", frame.name);
        write_image(&dir.join(&image_rel), &frame.image)?;
        let depth_rel = match &frame.depth {
            Some(d) => {
                std::fs::create_dir_all(dir.join("depth")).map_err(|e| Error::io(dir, e))?;
                let rel = format!("depth/{}.pfm", frame.name);
                write_pfm(&dir.join(&rel), d)?;
                Some(rel)
            }
            None => None,
        };
        let mask_rel = match &frame.mask {
            Some(m) => {
                std::fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(dir, e))?;
                let rel = format!("masks/{}.png", frame.name);
                write_mask(&dir.join(&rel), m)?;
                Some(rel)
            }
            None => None,
        };
        frames.push(ManifestFrame {
            name: frame.name.clone(),
            image: image_rel,
            depth: depth_rel,
            mask: mask_rel,
            split: frame.split,
            transform: frame.pose.to_matrix4().into_iter().flatten().collect(),
        });
    }
    let doc = ManifestDoc {
        version: MANIFEST_VERSION,
        camera: ManifestCamera {
            width: scene.camera.width,
            height: scene.camera.height,
            fx: scene.camera.fx,
            fy: scene.camera.fy,
            cx: scene.camera.cx,
            cy: scene.camera.cy,
        },
        bounds: ManifestBounds {
            near: scene.near,
            far: scene.far,
        },
        background: scene.background,
        frames,
    };
    let manifest = dir.join("scene.toml");
    let text = toml::to_string_pretty(&doc)
        .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
    std::fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

// --- transforms-layout JSON --------------------------------------------------

#[derive(serde::Deserialize)]
struct TransformsDoc {
    camera_angle_x: f64,
    frames: Vec<TransformsFrame>,
}

#[derive(serde::Deserialize)]
struct TransformsFrame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

/// Default sampling bounds for transforms-layout scenes, which do not carry
/// near/far themselves.
pub const TRANSFORMS_NEAR: f64 = 2.0;
pub const TRANSFORMS_FAR: f64 = 6.0;

fn load_transforms_json(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: TransformsDoc = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    // White background is the norm for these alpha-composited synthetic sets.
    let background = [1.0, 1.0, 1.0];

    let mut frames: Vec<Frame> = Vec::with_capacity(doc.frames.len());
    let mut camera: Option<Intrinsics> = None;
    for tf in &doc.frames {
        let rel = tf.file_path.trim_start_matches("./");
        let mut image_path = dir.join(rel);
        if image_path.extension().is_none() {
            image_path.set_extension("png");
        }
        let name = Path::new(rel)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(rel)
            .to_string();
        let image = read_image(&image_path, background)
            .map_err(|e| Error::Data(format!("frame '{name}': {e}")))?;
        let cam = match &camera {
            Some(c) => *c,
            None => {
                let c =
                    Intrinsics::from_fov_x(doc.camera_angle_x, image.width(), image.height())?;
                camera = Some(c);
                c
            }
        };
        if image.width() != cam.width || image.height() != cam.height {
            return Err(Error::Data(format!(
                "frame '{name}': image size differs from the first frame"
            )));
        }
        let pose = Pose::from_matrix4(&tf.transform_matrix)
            .map_err(|e| Error::Data(format!("frame '{name}': {e}")))?;
        frames.push(Frame {
            name,
            image,
            depth: None,
            mask: None,
            pose,
            split: Split::Train,
        });
    }
    let camera = camera.ok_or_else(|| {
        Error::Data(format!("{}: no frames in transforms file", path.display()))
    })?;
    Ok(Scene {
        camera,
        frames,
        near: TRANSFORMS_NEAR,
        far: TRANSFORMS_FAR,
        background,
    })
}

// --- image and mask files ----------------------------------------------------

/// Decode an RGB(A) image to linear `[0, 1]` floats; alpha, when present, is
/// composited over `background`.
pub fn read_image(path: &Path, background: [f64; 3]) -> Result<Image<f32>> {
    let decoded = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    })?;
    let rgba = decoded.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let mut out = Image::new(w, h);
    for (y, row) in rgba.rows().enumerate() {
        for (x, px) in row.enumerate() {
            let a = px[3] as f32 / 255.0;
            let mut rgb = [0.0f32; 3];
            for c in 0..3 {
                let v = px[c] as f32 / 255.0;
                rgb[c] = v * a + background[c] as f32 * (1.0 - a);
            }
            out.set(x, y, rgb);
        }
    }
    Ok(out)
}

/// Encode to 8-bit PNG (values clamped to `[0, 1]`).
pub fn write_image(path: &Path, img: &Image<f32>) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.get(x, y);
            let q = p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(x as u32, y as u32, image::Rgb(q));
        }
    }
    buf.save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Single-channel mask: any value above 127 is true.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let decoded = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    })?;
    let gray = decoded.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.pixels().map(|p| p[0] > 127).collect();
    Mask::from_data(w, h, data)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut buf = image::GrayImage::new(mask.width() as u32, mask.height() as u32);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            buf.put_pixel(x as u32, y as u32, image::Luma([if mask.get(x, y) { 255 } else { 0 }]));
        }
    }
    buf.save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compose_relative;

    #[test]
    fn native_manifest_round_trip_is_identical() {
        let scene = generate_toy_scene(&ToySceneSpec::sphere_box(), 3, 24, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_scene(dir.path(), &scene).unwrap();
        let loaded = load_scene(&manifest).unwrap();
        assert_eq!(loaded.camera, scene.camera);
        assert_eq!(loaded.near, scene.near);
        assert_eq!(loaded.far, scene.far);
        assert_eq!(loaded.frames.len(), scene.frames.len());
        for (a, b) in loaded.frames.iter().zip(&scene.frames) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.split, b.split);
            assert!(
                (a.pose.rotation() - b.pose.rotation()).abs().max() < 1e-15,
                "pose drifted in round trip"
            );
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            let (da, db) = (a.depth.as_ref().unwrap(), b.depth.as_ref().unwrap());
            for (x, y) in da.data().iter().zip(db.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn transforms_layout_derives_focal_from_fov() {
        let dir = tempfile::tempdir().unwrap();
        // A 16x16 dummy frame.
        let img = Image::filled(16, 16, [0.5f32, 0.5, 0.5]);
        write_image(&dir.path().join("r_0.png"), &img).unwrap();
        let json = serde_json::json!({
            "camera_angle_x": 0.6911,
            "frames": [{
                "file_path": "./r_0",
                "transform_matrix": [
                    [1.0, 0.0, 0.0, 0.0],
                    [0.0, 1.0, 0.0, 0.0],
                    [0.0, 0.0, 1.0, 4.0],
                    [0.0, 0.0, 0.0, 1.0]
                ]
            }]
        });
        let path = dir.path().join("transforms_train.json");
        std::fs::write(&path, serde_json::to_string(&json).unwrap()).unwrap();
        let scene = load_scene(&path).unwrap();
        let expect = 0.5 * 16.0 / (0.6911f64 / 2.0).tan();
        assert!((scene.camera.fx - expect).abs() < 1e-9);
        assert_eq!(scene.frames.len(), 1);
    }

    #[test]
    fn missing_file_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("scene.toml");
        std::fs::write(
            &manifest,
            r#"
version = 1
background = [1.0, 1.0, 1.0]
[camera]
width = 8
height = 8
fx = 8.0
fy = 8.0
cx = 4.0
cy = 4.0
[bounds]
near = 1.0
far = 5.0
[[frames]]
name = "gone"
image = "images/gone.png"
split = "train"
transform = [1.0,0.0,0.0,0.0, 0.0,1.0,0.0,0.0, 0.0,0.0,1.0,0.0, 0.0,0.0,0.0,1.0]
"#,
        )
        .unwrap();
        let err = load_scene(&manifest).unwrap_err();
        assert!(err.to_string().contains("gone"), "{err}");
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("scene.toml");
        std::fs::write(
            &manifest,
            "version = 1\nbackground = [1.0, 1.0, 1.0]\nbogus = 3\n[camera]\nwidth = 8\nheight = 8\nfx = 8.0\nfy = 8.0\ncx = 4.0\ncy = 4.0\n[bounds]\nnear = 1.0\nfar = 5.0\n",
        )
        .unwrap();
        let err = load_scene(&manifest).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn frame_without_depth_is_not_an_error() {
        let mut scene = generate_toy_scene(&ToySceneSpec::sphere_box(), 1, 16, 3).unwrap();
        scene.frames[0].depth = None;
        scene.frames[0].mask = None;
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_scene(dir.path(), &scene).unwrap();
        let loaded = load_scene(&manifest).unwrap();
        assert!(loaded.frames[0].depth.is_none());
    }

    #[test]
    fn toy_depths_are_warp_consistent_across_views() {
        // Back-project a valid pixel in view A, re-project into adjacent
        // view B, look up B's own depth at the nearest pixel, and warp back.
        // On surface points seen by both cameras the round trip lands within
        // half a pixel; silhouette pixels where the nearest-pixel depth
        // lookup jumps surfaces are excluded by a depth-agreement gate.
        let scene = generate_toy_scene(&ToySceneSpec::sphere_box(), 8, 48, 11).unwrap();
        let (a, b) = (&scene.frames[0], &scene.frames[1]);
        let cam = &scene.camera;
        let fwd = compose_relative(&a.pose, &b.pose);
        let back = compose_relative(&b.pose, &a.pose);
        let da = a.depth.as_ref().unwrap();
        let db = b.depth.as_ref().unwrap();
        let mut errors = Vec::new();
        for y in 0..cam.height {
            for x in 0..cam.width {
                let Some(d) = da.get(x, y) else { continue };
                let Some((u, v, d_pred)) =
                    crate::augment::warp_pixel(x as f64, y as f64, d, cam, &fwd).unwrap()
                else {
                    continue;
                };
                // Bilinearly interpolate B's depth at the continuous landing
                // point; rounding to a pixel center would dominate the error.
                let (x0, y0) = (u.floor(), v.floor());
                if x0 < 0.0 || y0 < 0.0 || x0 + 1.0 >= cam.width as f64 || y0 + 1.0 >= cam.height as f64 {
                    continue;
                }
                let (fx, fy) = (u - x0, v - y0);
                let corners = [
                    (x0 as usize, y0 as usize, (1.0 - fx) * (1.0 - fy)),
                    (x0 as usize + 1, y0 as usize, fx * (1.0 - fy)),
                    (x0 as usize, y0 as usize + 1, (1.0 - fx) * fy),
                    (x0 as usize + 1, y0 as usize + 1, fx * fy),
                ];
                let mut d_interp = 0.0;
                let mut ok = true;
                for (cx, cy, cw) in corners {
                    match db.get(cx, cy) {
                        Some(dv) => d_interp += cw * dv,
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                if !ok || (d_interp - d_pred).abs() / d_pred > 0.02 {
                    continue; // hole or different surface (occlusion boundary)
                }
                let Some((ub, vb, _)) =
                    crate::augment::warp_pixel(u, v, d_interp, cam, &back).unwrap()
                else {
                    continue;
                };
                errors.push(((ub - x as f64).powi(2) + (vb - y as f64).powi(2)).sqrt());
            }
        }
        assert!(errors.len() > 200, "too few comparable pixels: {}", errors.len());
        errors.sort_by(|p, q| p.total_cmp(q));
        let median = errors[errors.len() / 2];
        assert!(median < 0.5, "median round-trip reprojection error {median}");
    }
}
