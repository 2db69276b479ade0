//! Few-shot novel-view synthesis with a neural radiance field.
//!
//! The pipeline expands a handful of posed input images into a dense set of
//! depth-warped pseudo-views, initializes a radiance field on the expanded
//! set with a photometric loss, and then fine-tunes on the real views only
//! with two extra regularizers: a multi-scale embedding-consistency term and
//! an information-potential term that sharpens per-ray weight distributions.
//!
//! Everything is CPU-side and dependency-light: the field is a small MLP with
//! hand-written forward/backward passes, rendering is classic emission-
//! absorption ray marching, and warping is bilinear forward scattering with a
//! z-buffer. All training paths are deterministic for a fixed seed and thread
//! count of one; parallel reductions are chunk-ordered so results do not
//! depend on scheduling.
//!
//! Module map:
//! - [`geometry`]: cameras, rigid transforms, rays, and the pseudo-pose grid.
//! - [`field`]: positional encoding, the MLP, and its reverse-mode gradients.
//! - [`renderer`]: stratified sampling, transmittance compositing, gradients.
//! - [`augment`]: forward warping, scattering, validity and saliency masks.
//! - [`losses`]: photometric split, embedding consistency, information potential.
//! - [`trainer`]: Adam, the two-stage loop, checkpoints, metrics log.
//! - [`dataio`]: scene manifests, toy scenes, PFM depth maps, PSNR/SSIM.

pub mod augment;
pub mod dataio;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod raster;
pub mod renderer;
pub mod trainer;

mod error;
mod parallel;
mod real;

pub use error::{Error, Result};
pub use real::Real;

// The book chapters double as doctests so the guide can never drift from the
// API. Only compiled when rustdoc collects doctests.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(cameras_and_rays, "../../../book/src/cameras-and-rays.md");
    chapter!(radiance_field, "../../../book/src/radiance-field.md");
    chapter!(volume_rendering, "../../../book/src/volume-rendering.md");
    chapter!(pseudo_views, "../../../book/src/pseudo-views.md");
    chapter!(losses, "../../../book/src/losses.md");
    chapter!(training, "../../../book/src/training.md");
    chapter!(scenes_and_metrics, "../../../book/src/scenes-and-metrics.md");
    chapter!(command_line, "../../../book/src/command-line.md");
}
