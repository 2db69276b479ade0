//! The radiance field: sinusoidal input encoding, a small MLP mapping
//! (position, direction) to (density, color), and explicit reverse-mode
//! gradients over its parameters.
//!
//! The network topology is static, so differentiation is written as
//! layer-wise backward passes over a recorded forward state instead of a
//! general tape. That keeps every gradient auditable against finite
//! differences. The scalar type is generic: training runs in f32, gradient
//! verification in f64.
//!
//! Layout: position encoding feeds a ReLU trunk (optionally re-injected at a
//! skip layer), the trunk output feeds a softplus density head and a linear
//! feature layer, and the feature concatenated with the direction encoding
//! feeds one ReLU layer and a sigmoid RGB head.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{real::real, Error, Real, Result};

/// Sinusoidal encoding settings for positions and view directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncodingConfig {
    pub position_frequencies: usize,
    pub direction_frequencies: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            position_frequencies: 10,
            direction_frequencies: 4,
            include_input: true,
        }
    }
}

impl EncodingConfig {
    pub fn position_dim(&self) -> usize {
        encoded_dim(self.position_frequencies, self.include_input)
    }

    pub fn direction_dim(&self) -> usize {
        encoded_dim(self.direction_frequencies, self.include_input)
    }
}

fn encoded_dim(frequencies: usize, include_input: bool) -> usize {
    3 * (usize::from(include_input) + 2 * frequencies)
}

/// Append the encoding of one 3-vector to `out`: the raw input when
/// requested, then `sin(2^k v), cos(2^k v)` component-wise for
/// `k = 0..frequencies`.
pub fn encode_into<F: Real>(v: &[F; 3], frequencies: usize, include_input: bool, out: &mut Vec<F>) {
    if include_input {
        out.extend_from_slice(v);
    }
    let mut scale = F::one();
    for _ in 0..frequencies {
        for c in 0..3 {
            out.push((v[c] * scale).sin());
        }
        for c in 0..3 {
            out.push((v[c] * scale).cos());
        }
        scale = scale + scale;
    }
}

/// Encoding of one vector as a fresh buffer.
pub fn encode<F: Real>(v: &[F; 3], frequencies: usize, include_input: bool) -> Vec<F> {
    let mut out = Vec::with_capacity(encoded_dim(frequencies, include_input));
    encode_into(v, frequencies, include_input, &mut out);
    out
}

/// MLP shape. `skip_layer` is the hidden-layer index whose input gets the
/// position encoding concatenated again; it must lie in `1..hidden_layers`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FieldConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub skip_layer: Option<usize>,
    pub color_width: usize,
    pub encoding: EncodingConfig,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 8,
            hidden_width: 256,
            skip_layer: Some(4),
            color_width: 128,
            encoding: EncodingConfig::default(),
        }
    }
}

impl FieldConfig {
    /// Small network for desk-scale experiments and tests.
    pub fn desk() -> Self {
        Self {
            hidden_layers: 2,
            hidden_width: 32,
            skip_layer: None,
            color_width: 16,
            encoding: EncodingConfig {
                position_frequencies: 6,
                direction_frequencies: 3,
                include_input: true,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_width == 0 || self.color_width == 0 {
            return Err(Error::Config("field layer sizes must be positive".into()));
        }
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.hidden_layers {
                return Err(Error::Config(format!(
                    "skip layer {s} outside 1..{}",
                    self.hidden_layers
                )));
            }
        }
        Ok(())
    }
}

/// Named weight matrix or bias vector, row-major. Biases have `rows == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    fn zeros(name: &str, rows: usize, cols: usize) -> Self {
        Self {
            name: name.to_string(),
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Index of one linear layer's weight and bias inside the tensor list.
#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
    in_dim: usize,
    out_dim: usize,
}

/// The radiance field parameters plus the layer index built from the config.
#[derive(Debug, Clone)]
pub struct Mlp<F> {
    cfg: FieldConfig,
    tensors: Vec<Tensor<F>>,
    trunk: Vec<Linear>,
    sigma_head: Linear,
    feature: Linear,
    color_hidden: Linear,
    color_out: Linear,
}

/// Density and color for a batch of samples.
#[derive(Debug, Clone)]
pub struct FieldOutput<F> {
    pub sigma: Vec<F>,
    pub rgb: Vec<[F; 3]>,
}

/// Recorded activations from [`Mlp::forward`], consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardState<F> {
    n: usize,
    pos_enc: Vec<F>,
    /// Post-activation output of every trunk layer, `[n * width]` each.
    trunk_out: Vec<Vec<F>>,
    /// Concatenated (feature, dir_enc) input of the color branch.
    color_in: Vec<F>,
    color_hidden_out: Vec<F>,
    /// sigmoid of the raw density (softplus derivative), `[n]`.
    sigma_sig: Vec<F>,
    rgb: Vec<[F; 3]>,
}

/// Gradient buffers shaped like the parameter list.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros_like(mlp: &Mlp<F>) -> Self {
        Self {
            tensors: mlp
                .tensors
                .iter()
                .map(|t| Tensor::zeros(&t.name, t.rows, t.cols))
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.fill(F::zero());
        }
    }

    pub fn add(&mut self, other: &Gradients<F>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= s;
            }
        }
    }
}

// y[i, :] = bias + x[i, :] . w  for a row-major w of [in_dim x out_dim].
fn linear_forward<F: Real>(x: &[F], n: usize, lin: Linear, w: &[F], b: &[F], y: &mut Vec<F>) {
    y.clear();
    y.reserve(n * lin.out_dim);
    for i in 0..n {
        let row = &x[i * lin.in_dim..(i + 1) * lin.in_dim];
        let base = y.len();
        y.extend_from_slice(b);
        let out = &mut y[base..base + lin.out_dim];
        for (k, &xv) in row.iter().enumerate() {
            if xv == F::zero() {
                continue;
            }
            let wrow = &w[k * lin.out_dim..(k + 1) * lin.out_dim];
            for j in 0..lin.out_dim {
                out[j] += xv * wrow[j];
            }
        }
    }
}

// dw += x^T dz ; db += column sums of dz ; dx = dz . w^T (written, not added).
fn linear_backward<F: Real>(
    x: &[F],
    n: usize,
    lin: Linear,
    w: &[F],
    dz: &[F],
    dw: &mut [F],
    db: &mut [F],
    dx: Option<&mut Vec<F>>,
) {
    for i in 0..n {
        let xrow = &x[i * lin.in_dim..(i + 1) * lin.in_dim];
        let dzrow = &dz[i * lin.out_dim..(i + 1) * lin.out_dim];
        for j in 0..lin.out_dim {
            db[j] += dzrow[j];
        }
        for (k, &xv) in xrow.iter().enumerate() {
            if xv == F::zero() {
                continue;
            }
            let dwrow = &mut dw[k * lin.out_dim..(k + 1) * lin.out_dim];
            for j in 0..lin.out_dim {
                dwrow[j] += xv * dzrow[j];
            }
        }
    }
    if let Some(dx) = dx {
        dx.clear();
        dx.resize(n * lin.in_dim, F::zero());
        for i in 0..n {
            let dzrow = &dz[i * lin.out_dim..(i + 1) * lin.out_dim];
            let dxrow = &mut dx[i * lin.in_dim..(i + 1) * lin.in_dim];
            for (k, dxv) in dxrow.iter_mut().enumerate() {
                let wrow = &w[k * lin.out_dim..(k + 1) * lin.out_dim];
                let mut acc = F::zero();
                for j in 0..lin.out_dim {
                    acc += dzrow[j] * wrow[j];
                }
                *dxv = acc;
            }
        }
    }
}

fn softplus<F: Real>(x: F) -> F {
    // max(x, 0) + ln(1 + exp(-|x|)) is stable for large |x|.
    x.max(F::zero()) + (F::one() + (-x.abs()).exp()).ln()
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Real> Mlp<F> {
    /// Build the tensor list for `cfg` with all parameters zero.
    pub fn zeros(cfg: FieldConfig) -> Result<Self> {
        cfg.validate()?;
        let pos_dim = cfg.encoding.position_dim();
        let dir_dim = cfg.encoding.direction_dim();
        let width = cfg.hidden_width;

        let mut tensors = Vec::new();
        let mut trunk = Vec::new();
        let push = |tensors: &mut Vec<Tensor<F>>, name: &str, in_dim: usize, out_dim: usize| {
            tensors.push(Tensor::zeros(&format!("{name}.w"), in_dim, out_dim));
            tensors.push(Tensor::zeros(&format!("{name}.b"), 1, out_dim));
            Linear {
                w: tensors.len() - 2,
                b: tensors.len() - 1,
                in_dim,
                out_dim,
            }
        };

        for i in 0..cfg.hidden_layers {
            let in_dim = if i == 0 {
                pos_dim
            } else if cfg.skip_layer == Some(i) {
                width + pos_dim
            } else {
                width
            };
            trunk.push(push(&mut tensors, &format!("trunk{i}"), in_dim, width));
        }
        let sigma_head = push(&mut tensors, "sigma", width, 1);
        let feature = push(&mut tensors, "feature", width, width);
        let color_hidden = push(&mut tensors, "color0", width + dir_dim, cfg.color_width);
        let color_out = push(&mut tensors, "color1", cfg.color_width, 3);

        Ok(Self {
            cfg,
            tensors,
            trunk,
            sigma_head,
            feature,
            color_hidden,
            color_out,
        })
    }

    /// Seeded uniform Xavier initialization.
    pub fn init(cfg: FieldConfig, seed: u64) -> Result<Self> {
        let mut mlp = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut mlp.tensors {
            if t.name.ends_with(".b") {
                continue;
            }
            let bound = (6.0 / (t.rows + t.cols) as f64).sqrt();
            for v in &mut t.data {
                *v = real(rng.gen_range(-bound..bound));
            }
        }
        Ok(mlp)
    }

    pub fn config(&self) -> &FieldConfig {
        &self.cfg
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Mlp<G> {
        let mut out = Mlp::<G>::zeros(self.cfg).expect("config already validated");
        for (dst, src) in out.tensors.iter_mut().zip(&self.tensors) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d = real(s.to_f64_lossy());
            }
        }
        out
    }

    fn check_finite(&self, values: &[F], layer: &str) -> Result<()> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite activation in layer '{layer}'"
            )));
        }
        Ok(())
    }

    /// Evaluate the field on a batch. Directions must be unit-norm.
    pub fn forward(
        &self,
        positions: &[[F; 3]],
        directions: &[[F; 3]],
    ) -> Result<(FieldOutput<F>, ForwardState<F>)> {
        if positions.len() != directions.len() {
            return Err(Error::Contract(format!(
                "{} positions vs {} directions",
                positions.len(),
                directions.len()
            )));
        }
        let n = positions.len();
        let enc = &self.cfg.encoding;
        let pos_dim = enc.position_dim();
        let dir_dim = enc.direction_dim();

        let mut pos_enc = Vec::with_capacity(n * pos_dim);
        for p in positions {
            encode_into(p, enc.position_frequencies, enc.include_input, &mut pos_enc);
        }
        let mut dir_enc = Vec::with_capacity(n * dir_dim);
        for d in directions {
            encode_into(d, enc.direction_frequencies, enc.include_input, &mut dir_enc);
        }
        self.check_finite(&pos_enc, "encode(position)")?;
        self.check_finite(&dir_enc, "encode(direction)")?;

        let mut trunk_out = Vec::with_capacity(self.trunk.len());
        let mut skip_buf = Vec::new();
        let mut z = Vec::new();
        for (i, lin) in self.trunk.iter().enumerate() {
            let input: &[F] = if i == 0 {
                &pos_enc
            } else if self.cfg.skip_layer == Some(i) {
                // Re-inject the position encoding next to the running width.
                let prev: &Vec<F> = &trunk_out[i - 1];
                skip_buf.clear();
                skip_buf.reserve(n * lin.in_dim);
                for s in 0..n {
                    skip_buf.extend_from_slice(
                        &prev[s * self.cfg.hidden_width..(s + 1) * self.cfg.hidden_width],
                    );
                    skip_buf.extend_from_slice(&pos_enc[s * pos_dim..(s + 1) * pos_dim]);
                }
                &skip_buf
            } else {
                &trunk_out[i - 1]
            };
            linear_forward(
                input,
                n,
                *lin,
                &self.tensors[lin.w].data,
                &self.tensors[lin.b].data,
                &mut z,
            );
            for v in &mut z {
                if *v < F::zero() {
                    *v = F::zero();
                }
            }
            self.check_finite(&z, &format!("trunk{i}"))?;
            trunk_out.push(std::mem::take(&mut z));
        }
        let h = trunk_out.last().expect("at least one trunk layer");

        let mut sigma_raw = Vec::new();
        linear_forward(
            h,
            n,
            self.sigma_head,
            &self.tensors[self.sigma_head.w].data,
            &self.tensors[self.sigma_head.b].data,
            &mut sigma_raw,
        );
        self.check_finite(&sigma_raw, "sigma")?;

        let mut feat = Vec::new();
        linear_forward(
            h,
            n,
            self.feature,
            &self.tensors[self.feature.w].data,
            &self.tensors[self.feature.b].data,
            &mut feat,
        );
        self.check_finite(&feat, "feature")?;

        let width = self.cfg.hidden_width;
        let mut color_in = Vec::with_capacity(n * (width + dir_dim));
        for s in 0..n {
            color_in.extend_from_slice(&feat[s * width..(s + 1) * width]);
            color_in.extend_from_slice(&dir_enc[s * dir_dim..(s + 1) * dir_dim]);
        }

        let mut color_hidden_out = Vec::new();
        linear_forward(
            &color_in,
            n,
            self.color_hidden,
            &self.tensors[self.color_hidden.w].data,
            &self.tensors[self.color_hidden.b].data,
            &mut color_hidden_out,
        );
        for v in &mut color_hidden_out {
            if *v < F::zero() {
                *v = F::zero();
            }
        }
        self.check_finite(&color_hidden_out, "color0")?;

        let mut rgb_raw = Vec::new();
        linear_forward(
            &color_hidden_out,
            n,
            self.color_out,
            &self.tensors[self.color_out.w].data,
            &self.tensors[self.color_out.b].data,
            &mut rgb_raw,
        );
        self.check_finite(&rgb_raw, "color1")?;

        let sigma: Vec<F> = sigma_raw.iter().map(|&x| softplus(x)).collect();
        let sigma_sig: Vec<F> = sigma_raw.iter().map(|&x| sigmoid(x)).collect();
        let rgb: Vec<[F; 3]> = rgb_raw
            .chunks_exact(3)
            .map(|c| [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])])
            .collect();

        let output = FieldOutput {
            sigma,
            rgb: rgb.clone(),
        };
        let state = ForwardState {
            n,
            pos_enc,
            trunk_out,
            color_in,
            color_hidden_out,
            sigma_sig,
            rgb,
        };
        Ok((output, state))
    }

    /// Accumulate parameter gradients of `sigma . d_sigma + rgb . d_rgb`.
    pub fn backward(
        &self,
        state: &ForwardState<F>,
        d_sigma: &[F],
        d_rgb: &[[F; 3]],
        grads: &mut Gradients<F>,
    ) -> Result<()> {
        let n = state.n;
        if d_sigma.len() != n || d_rgb.len() != n {
            return Err(Error::Contract(format!(
                "gradient batch {} / {} does not match forward batch {n}",
                d_sigma.len(),
                d_rgb.len()
            )));
        }
        if grads.tensors.len() != self.tensors.len() {
            return Err(Error::Contract("gradient buffer shape mismatch".into()));
        }
        let enc = &self.cfg.encoding;
        let pos_dim = enc.position_dim();
        let width = self.cfg.hidden_width;

        // Sigmoid head: d/draw = rgb (1 - rgb).
        let mut d_rgb_raw = Vec::with_capacity(n * 3);
        for (g, y) in d_rgb.iter().zip(&state.rgb) {
            for c in 0..3 {
                d_rgb_raw.push(g[c] * y[c] * (F::one() - y[c]));
            }
        }

        let mut d_color_hidden = Vec::new();
        {
            let (dw, db) = grads_pair(&mut grads.tensors, self.color_out);
            linear_backward(
                &state.color_hidden_out,
                n,
                self.color_out,
                &self.tensors[self.color_out.w].data,
                &d_rgb_raw,
                dw,
                db,
                Some(&mut d_color_hidden),
            );
        }
        for (g, &h) in d_color_hidden.iter_mut().zip(&state.color_hidden_out) {
            if h <= F::zero() {
                *g = F::zero();
            }
        }

        let mut d_color_in = Vec::new();
        {
            let (dw, db) = grads_pair(&mut grads.tensors, self.color_hidden);
            linear_backward(
                &state.color_in,
                n,
                self.color_hidden,
                &self.tensors[self.color_hidden.w].data,
                &d_color_hidden,
                dw,
                db,
                Some(&mut d_color_in),
            );
        }
        // Direction-encoding slice carries no parameter gradient.
        let mut d_feat = Vec::with_capacity(n * width);
        let color_in_dim = self.color_hidden.in_dim;
        for s in 0..n {
            d_feat.extend_from_slice(&d_color_in[s * color_in_dim..s * color_in_dim + width]);
        }

        let h = state.trunk_out.last().expect("trunk output recorded");
        let mut d_h = Vec::new();
        {
            let (dw, db) = grads_pair(&mut grads.tensors, self.feature);
            linear_backward(
                h,
                n,
                self.feature,
                &self.tensors[self.feature.w].data,
                &d_feat,
                dw,
                db,
                Some(&mut d_h),
            );
        }

        // Softplus head: d/draw = sigmoid(raw), recorded during forward.
        let d_sigma_raw: Vec<F> = d_sigma
            .iter()
            .zip(&state.sigma_sig)
            .map(|(&g, &s)| g * s)
            .collect();
        let mut d_h_sigma = Vec::new();
        {
            let (dw, db) = grads_pair(&mut grads.tensors, self.sigma_head);
            linear_backward(
                h,
                n,
                self.sigma_head,
                &self.tensors[self.sigma_head.w].data,
                &d_sigma_raw,
                dw,
                db,
                Some(&mut d_h_sigma),
            );
        }
        for (a, b) in d_h.iter_mut().zip(&d_h_sigma) {
            *a += *b;
        }

        let mut skip_buf = Vec::new();
        let mut d_input = Vec::new();
        for i in (0..self.trunk.len()).rev() {
            let lin = self.trunk[i];
            // ReLU mask from the recorded post-activation output.
            for (g, &o) in d_h.iter_mut().zip(&state.trunk_out[i]) {
                if o <= F::zero() {
                    *g = F::zero();
                }
            }
            let input: &[F] = if i == 0 {
                &state.pos_enc
            } else if self.cfg.skip_layer == Some(i) {
                let prev = &state.trunk_out[i - 1];
                skip_buf.clear();
                skip_buf.reserve(n * lin.in_dim);
                for s in 0..n {
                    skip_buf.extend_from_slice(&prev[s * width..(s + 1) * width]);
                    skip_buf.extend_from_slice(&state.pos_enc[s * pos_dim..(s + 1) * pos_dim]);
                }
                &skip_buf
            } else {
                &state.trunk_out[i - 1]
            };
            let want_dx = i > 0;
            {
                let (dw, db) = grads_pair(&mut grads.tensors, lin);
                linear_backward(
                    input,
                    n,
                    lin,
                    &self.tensors[lin.w].data,
                    &d_h,
                    dw,
                    db,
                    want_dx.then_some(&mut d_input),
                );
            }
            if want_dx {
                if self.cfg.skip_layer == Some(i) {
                    // Keep only the running-width slice; the re-injected
                    // encoding is an input, not an upstream activation.
                    d_h.clear();
                    d_h.reserve(n * width);
                    for s in 0..n {
                        d_h.extend_from_slice(&d_input[s * lin.in_dim..s * lin.in_dim + width]);
                    }
                } else {
                    std::mem::swap(&mut d_h, &mut d_input);
                }
            }
        }
        Ok(())
    }
}

fn grads_pair<F: Real>(tensors: &mut [Tensor<F>], lin: Linear) -> (&mut [F], &mut [F]) {
    debug_assert!(lin.b == lin.w + 1);
    let (a, b) = tensors.split_at_mut(lin.b);
    (&mut a[lin.w].data, &mut b[0].data)
}

// --- checkpoint format -----------------------------------------------------
//
// Little-endian binary:
//   magic "SVFIELD1" | version u32 | pos_freqs u32 | dir_freqs u32 |
//   include_input u8 | hidden_layers u32 | hidden_width u32 |
//   skip (u32, MAX = none) | color_width u32 | tensor_count u32 |
//   per tensor: name_len u32, name bytes, rows u32, cols u32, f32 data.

const CHECKPOINT_MAGIC: &[u8; 8] = b"SVFIELD1";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_field(mlp: &Mlp<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    write_u32(&mut buf, CHECKPOINT_VERSION);
    let cfg = mlp.config();
    write_u32(&mut buf, cfg.encoding.position_frequencies as u32);
    write_u32(&mut buf, cfg.encoding.direction_frequencies as u32);
    buf.push(u8::from(cfg.encoding.include_input));
    write_u32(&mut buf, cfg.hidden_layers as u32);
    write_u32(&mut buf, cfg.hidden_width as u32);
    write_u32(&mut buf, cfg.skip_layer.map_or(u32::MAX, |s| s as u32));
    write_u32(&mut buf, cfg.color_width as u32);
    write_u32(&mut buf, mlp.tensors.len() as u32);
    for t in &mlp.tensors {
        write_u32(&mut buf, t.name.len() as u32);
        buf.extend_from_slice(t.name.as_bytes());
        write_u32(&mut buf, t.rows as u32);
        write_u32(&mut buf, t.cols as u32);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

pub fn load_field(path: &Path) -> Result<Mlp<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor::new(&bytes, path);
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!(
            "{}: not a field checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "{}: checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})",
            path.display()
        )));
    }
    let pos = r.u32()? as usize;
    let dir = r.u32()? as usize;
    let include_input = r.take(1)?[0] != 0;
    let hidden_layers = r.u32()? as usize;
    let hidden_width = r.u32()? as usize;
    let skip = r.u32()?;
    let color_width = r.u32()? as usize;
    let cfg = FieldConfig {
        hidden_layers,
        hidden_width,
        skip_layer: (skip != u32::MAX).then_some(skip as usize),
        color_width,
        encoding: EncodingConfig {
            position_frequencies: pos,
            direction_frequencies: dir,
            include_input,
        },
    };
    let mut mlp = Mlp::<f32>::zeros(cfg)?;
    let count = r.u32()? as usize;
    if count != mlp.tensors.len() {
        return Err(Error::Data(format!(
            "{}: {count} tensors, expected {}",
            path.display(),
            mlp.tensors.len()
        )));
    }
    for t in &mut mlp.tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Data(format!("{}: tensor name not utf-8", path.display())))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if name != t.name || rows != t.rows || cols != t.cols {
            return Err(Error::Data(format!(
                "{}: tensor '{name}' ({rows}x{cols}) does not match expected '{}' ({}x{})",
                path.display(),
                t.name,
                t.rows,
                t.cols
            )));
        }
        for v in &mut t.data {
            let raw = r.take(4)?;
            *v = f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]);
        }
    }
    Ok(mlp)
}

pub(crate) fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Write-then-rename so readers never observe a partial checkpoint.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self {
            bytes,
            offset: 0,
            path,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Data(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.offset
            )));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.offset
    }
}
