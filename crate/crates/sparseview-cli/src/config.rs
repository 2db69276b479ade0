//! Run configuration: a TOML file with `[train]`, `[field]`, and `[augment]`
//! sections whose keys mirror the command-line flags one to one. Flags
//! override file values; unknown keys are rejected.

use std::path::Path;

use serde::Deserialize;
use sparseview::augment::{BackgroundRule, ConflictPolicy, SaliencyProvider};
use sparseview::field::{EncodingConfig, FieldConfig};
use sparseview::trainer::TrainConfig;
use sparseview::{Error, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub field: FieldSection,
    #[serde(default)]
    pub augment: AugmentSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub init_iters: Option<usize>,
    pub finetune_iters: Option<usize>,
    pub rays_per_batch: Option<usize>,
    pub samples_per_ray: Option<usize>,
    pub learning_rate: Option<f64>,
    pub decay_floor: Option<f64>,
    pub lambda_msc: Option<f64>,
    pub lambda_ip: Option<f64>,
    pub bg_weight: Option<f64>,
    pub seed: Option<u64>,
    pub msc_interval: Option<usize>,
    pub msc_render_size: Option<usize>,
    pub checkpoint_interval: Option<usize>,
    pub real_fraction: Option<f64>,
    pub jitter: Option<bool>,
    pub probe_view: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    pub hidden_layers: Option<usize>,
    pub hidden_width: Option<usize>,
    pub skip_layer: Option<usize>,
    pub color_width: Option<usize>,
    pub position_frequencies: Option<usize>,
    pub direction_frequencies: Option<usize>,
    pub include_input: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub alpha: Option<f64>,
    pub step: Option<f64>,
    pub depth_band: Option<f64>,
    pub min_weight: Option<f64>,
    pub saliency: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Merge precedence: defaults, then file, then flags (handled by callers
/// passing flag values as `Option`s into these helpers).
pub fn build_train_config(file: &TrainSection, flags: &TrainSection) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        init_iterations: flags.init_iters.or(file.init_iters).unwrap_or(d.init_iterations),
        finetune_iterations: flags
            .finetune_iters
            .or(file.finetune_iters)
            .unwrap_or(d.finetune_iterations),
        rays_per_batch: flags
            .rays_per_batch
            .or(file.rays_per_batch)
            .unwrap_or(d.rays_per_batch),
        samples_per_ray: flags
            .samples_per_ray
            .or(file.samples_per_ray)
            .unwrap_or(d.samples_per_ray),
        learning_rate: flags
            .learning_rate
            .or(file.learning_rate)
            .unwrap_or(d.learning_rate),
        decay_floor: flags.decay_floor.or(file.decay_floor).unwrap_or(d.decay_floor),
        lambda_msc: flags.lambda_msc.or(file.lambda_msc).unwrap_or(d.lambda_msc),
        lambda_ip: flags.lambda_ip.or(file.lambda_ip).unwrap_or(d.lambda_ip),
        bg_weight: flags.bg_weight.or(file.bg_weight).unwrap_or(d.bg_weight),
        seed: flags.seed.or(file.seed).unwrap_or(d.seed),
        msc_interval: flags.msc_interval.or(file.msc_interval).unwrap_or(d.msc_interval),
        msc_render_size: flags
            .msc_render_size
            .or(file.msc_render_size)
            .unwrap_or(d.msc_render_size),
        checkpoint_interval: flags
            .checkpoint_interval
            .or(file.checkpoint_interval)
            .unwrap_or(d.checkpoint_interval),
        real_fraction: flags.real_fraction.or(file.real_fraction),
        jitter: flags.jitter.or(file.jitter).unwrap_or(d.jitter),
        probe_view: flags.probe_view.or(file.probe_view),
    }
}

pub fn build_field_config(file: &FieldSection, flags: &FieldSection) -> FieldConfig {
    let d = FieldConfig::desk();
    let hidden_layers = flags
        .hidden_layers
        .or(file.hidden_layers)
        .unwrap_or(d.hidden_layers);
    let skip = flags.skip_layer.or(file.skip_layer).or(d.skip_layer);
    FieldConfig {
        hidden_layers,
        hidden_width: flags
            .hidden_width
            .or(file.hidden_width)
            .unwrap_or(d.hidden_width),
        // A skip landing outside the trunk is dropped rather than rejected,
        // so shrinking the depth does not require touching the skip knob.
        skip_layer: skip.filter(|&s| s > 0 && s < hidden_layers),
        color_width: flags.color_width.or(file.color_width).unwrap_or(d.color_width),
        encoding: EncodingConfig {
            position_frequencies: flags
                .position_frequencies
                .or(file.position_frequencies)
                .unwrap_or(d.encoding.position_frequencies),
            direction_frequencies: flags
                .direction_frequencies
                .or(file.direction_frequencies)
                .unwrap_or(d.encoding.direction_frequencies),
            include_input: flags
                .include_input
                .or(file.include_input)
                .unwrap_or(d.encoding.include_input),
        },
    }
}

pub struct AugmentSettings {
    pub alpha: f64,
    pub step: f64,
    pub policy: ConflictPolicy,
    pub saliency: SaliencyProvider,
}

pub fn build_augment_settings(file: &AugmentSection, flags: &AugmentSection) -> Result<AugmentSettings> {
    let policy = ConflictPolicy {
        depth_band: flags
            .depth_band
            .or(file.depth_band)
            .unwrap_or(ConflictPolicy::default().depth_band),
        min_weight: flags
            .min_weight
            .or(file.min_weight)
            .unwrap_or(ConflictPolicy::default().min_weight),
    };
    let saliency_str = flags
        .saliency
        .clone()
        .or_else(|| file.saliency.clone())
        .unwrap_or_else(|| "finite-depth".to_string());
    let saliency = parse_saliency(&saliency_str)?;
    Ok(AugmentSettings {
        alpha: flags.alpha.or(file.alpha).unwrap_or(30.0),
        step: flags.step.or(file.step).unwrap_or(5.0),
        policy,
        saliency,
    })
}

/// `finite-depth`, `threshold:<dist>`, `percentile:<p>`, or `masks` (use the
/// scene's per-frame mask files).
pub fn parse_saliency(s: &str) -> Result<SaliencyProvider> {
    if s == "finite-depth" {
        return Ok(SaliencyProvider::Depth(BackgroundRule::FiniteDepth));
    }
    if s == "masks" {
        // Resolved against the scene at use site; encode as an empty external
        // list the caller replaces.
        return Ok(SaliencyProvider::External(Vec::new()));
    }
    if let Some(v) = s.strip_prefix("threshold:") {
        let t: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("bad saliency threshold '{v}'")))?;
        return Ok(SaliencyProvider::Depth(BackgroundRule::FixedThreshold(t)));
    }
    if let Some(v) = s.strip_prefix("percentile:") {
        let p: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("bad saliency percentile '{v}'")))?;
        return Ok(SaliencyProvider::Depth(BackgroundRule::Percentile(p)));
    }
    Err(Error::Config(format!(
        "unknown saliency rule '{s}' (finite-depth | threshold:<d> | percentile:<p> | masks)"
    )))
}
