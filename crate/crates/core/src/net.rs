//! A small σ-conditioned convolutional velocity predictor with hand-written
//! reverse-mode gradients.
//!
//! Every layer is a 3×3 (optionally dilated) convolution with zero padding,
//! so one parameter vector serves any input resolution. Hidden layers are
//! modulated by the noise level through a sinusoidal embedding mapped to a
//! per-channel scale and offset, receive an additive per-class embedding,
//! and end in a SiLU.
//!
//! The output is read as the rectified-flow velocity `v = ε - x0`, so that
//! `x0 = x_t - σ·v`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, SeededRng};

const CHECKPOINT_MAGIC: &[u8; 8] = b"RMDNET\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
    /// Conditioned hidden layer with SiLU when true; plain linear conv otherwise.
    pub activation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetArch {
    pub layers: Vec<LayerSpec>,
    pub time_embed_dim: usize,
    pub class_count: usize,
}

impl NetArch {
    /// `channels`-wide hidden stack over single-channel images.
    pub fn standard(image_channels: usize, hidden: usize, dilations: &[usize], class_count: usize) -> Self {
        let mut layers = Vec::with_capacity(dilations.len() + 1);
        let mut cin = image_channels;
        for &d in dilations {
            layers.push(LayerSpec {
                in_channels: cin,
                out_channels: hidden,
                dilation: d,
                activation: true,
            });
            cin = hidden;
        }
        layers.push(LayerSpec {
            in_channels: cin,
            out_channels: image_channels,
            dilation: 1,
            activation: false,
        });
        Self {
            layers,
            time_embed_dim: 8,
            class_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Invalid("network needs at least one layer".into()));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Invalid("time_embed_dim must be even".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels == 0 || l.out_channels == 0 || l.dilation == 0 {
                return Err(Error::Invalid(format!("layer {i} has a zero dimension")));
            }
            if i > 0 && self.layers[i - 1].out_channels != l.in_channels {
                return Err(Error::Invalid(format!("layer {i} channel mismatch")));
            }
        }
        if self.layers[0].in_channels != self.layers.last().unwrap().out_channels {
            return Err(Error::Invalid("output channels must equal input channels".into()));
        }
        Ok(())
    }

    fn layout(&self) -> (Vec<LayerOffsets>, usize) {
        let e = self.time_embed_dim;
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let offsets = self
            .layers
            .iter()
            .map(|l| {
                let weight = take(l.out_channels * l.in_channels * 9);
                let bias = take(l.out_channels);
                let film = l.activation.then(|| FilmOffsets {
                    scale_w: take(l.out_channels * e),
                    scale_b: take(l.out_channels),
                    shift_w: take(l.out_channels * e),
                    shift_b: take(l.out_channels),
                    class_emb: take(l.out_channels * self.class_count),
                });
                LayerOffsets { weight, bias, film }
            })
            .collect();
        (offsets, at)
    }

    pub fn param_count(&self) -> usize {
        self.layout().1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FilmOffsets {
    scale_w: usize,
    scale_b: usize,
    shift_w: usize,
    shift_b: usize,
    class_emb: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerOffsets {
    weight: usize,
    bias: usize,
    film: Option<FilmOffsets>,
}

/// Gradient aligned with a network's flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn add_assign(&mut self, other: &GradientVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for g in &mut self.0 {
            *g *= a;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    arch: NetArch,
    offsets: Vec<LayerOffsets>,
    pub params: Vec<f64>,
}

/// Activations saved by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    height: usize,
    width: usize,
    embed: Vec<f64>,
    class_id: Option<usize>,
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Conv output (with bias) of each conditioned layer.
    conv_out: Vec<Vec<f64>>,
    /// Pre-activation after modulation.
    pre_act: Vec<Vec<f64>>,
    /// Per-layer FiLM scale, per output channel.
    film_scale: Vec<Vec<f64>>,
}

/// Sinusoidal features of σ at frequencies `π·2^k`.
pub fn sigma_embedding(sigma: f64, dim: usize) -> Vec<f64> {
    let mut e = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        e.push((w * sigma).sin());
        e.push((w * sigma).cos());
    }
    e
}

#[inline]
fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

#[inline]
fn silu(a: f64) -> f64 {
    a * sigmoid(a)
}

#[inline]
fn silu_grad(a: f64) -> f64 {
    let s = sigmoid(a);
    s + a * s * (1.0 - s)
}

/// Valid output range `[lo, hi)` along an axis of length `n` for tap offset `d`.
#[inline]
fn tap_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi.max(lo.min(n)))
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    dil: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let op = &mut out[o * plane..(o + 1) * plane];
        op.fill(bias[o]);
        for i in 0..cin {
            let ip = &input[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                let dy = (ky as isize - 1) * dil as isize;
                let (y0, y1) = tap_range(h, dy);
                for kx in 0..3 {
                    let dx = (kx as isize - 1) * dil as isize;
                    let (x0, x1) = tap_range(w, dx);
                    let wv = weight[((o * cin + i) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut op[y * w + x0..y * w + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let irow = &ip[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (a, b) in orow.iter_mut().zip(irow) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    grad_out: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    dil: usize,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Vec<f64> {
    let plane = h * w;
    let mut grad_in = vec![0.0; cin * plane];
    for o in 0..cout {
        let gp = &grad_out[o * plane..(o + 1) * plane];
        grad_bias[o] += gp.iter().sum::<f64>();
        for i in 0..cin {
            let ip = &input[i * plane..(i + 1) * plane];
            let gip = &mut grad_in[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                let dy = (ky as isize - 1) * dil as isize;
                let (y0, y1) = tap_range(h, dy);
                for kx in 0..3 {
                    let dx = (kx as isize - 1) * dil as isize;
                    let (x0, x1) = tap_range(w, dx);
                    let widx = ((o * cin + i) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let mut gw = 0.0;
                    let sx0 = (x0 as isize + dx) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &gp[y * w + x0..y * w + x1];
                        let irow = &ip[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        gw += grow.iter().zip(irow).map(|(g, v)| g * v).sum::<f64>();
                        let girow = &mut gip[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (a, g) in girow.iter_mut().zip(grow) {
                            *a += wv * g;
                        }
                    }
                    grad_weight[widx] += gw;
                }
            }
        }
    }
    grad_in
}

impl DenoiserNet {
    pub fn zeros(arch: NetArch) -> Result<Self> {
        arch.validate()?;
        let (offsets, n) = arch.layout();
        Ok(Self {
            arch,
            offsets,
            params: vec![0.0; n],
        })
    }

    /// He-scaled Gaussian convolution weights; conditioning weights small.
    /// The final layer is scaled by `output_scale`.
    pub fn init(arch: NetArch, rng: &mut SeededRng, output_scale: f64) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let e = net.arch.time_embed_dim;
        let last = net.arch.layers.len() - 1;
        for (li, (spec, off)) in net.arch.layers.iter().zip(&net.offsets).enumerate() {
            let std = (2.0 / (spec.in_channels * 9) as f64).sqrt()
                * if li == last { output_scale } else { 1.0 };
            for p in &mut net.params[off.weight..off.weight + spec.out_channels * spec.in_channels * 9] {
                *p = std * rng.normal();
            }
            if let Some(f) = off.film {
                let n = spec.out_channels * e;
                let s = 0.3 / (e as f64).sqrt();
                for p in &mut net.params[f.scale_w..f.scale_w + n] {
                    *p = s * rng.normal();
                }
                for p in &mut net.params[f.shift_w..f.shift_w + n] {
                    *p = s * rng.normal();
                }
                for p in &mut net.params[f.class_emb..f.class_emb + spec.out_channels * net.arch.class_count] {
                    *p = 0.1 * rng.normal();
                }
            }
        }
        Ok(net)
    }

    pub fn from_params(arch: NetArch, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape {
                expected: format!("{} parameters", net.params.len()),
                got: format!("{} parameters", params.len()),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &ImageGrid, sigma: f64, class_id: Option<usize>) -> Result<()> {
        if x.channels() != self.arch.layers[0].in_channels {
            return Err(Error::Shape {
                expected: format!("{} channels", self.arch.layers[0].in_channels),
                got: format!("{} channels", x.channels()),
            });
        }
        if !(0.0..=1.0).contains(&sigma) {
            return Err(Error::Domain {
                value: sigma,
                domain: "sigma in [0, 1]",
            });
        }
        if let Some(c) = class_id {
            if c >= self.arch.class_count {
                return Err(Error::ClassOutOfRange {
                    class_id: c,
                    count: self.arch.class_count,
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &ImageGrid, sigma: f64, class_id: Option<usize>) -> Result<ImageGrid> {
        self.forward_with_tape(x, sigma, class_id).map(|(y, _)| y)
    }

    pub fn forward_with_tape(
        &self,
        x: &ImageGrid,
        sigma: f64,
        class_id: Option<usize>,
    ) -> Result<(ImageGrid, Tape)> {
        self.check_input(x, sigma, class_id)?;
        let (h, w) = (x.height(), x.width());
        let plane = h * w;
        let e = self.arch.time_embed_dim;
        let embed = sigma_embedding(sigma, e);
        let mut tape = Tape {
            height: h,
            width: w,
            embed,
            class_id,
            inputs: Vec::with_capacity(self.arch.layers.len()),
            conv_out: Vec::new(),
            pre_act: Vec::new(),
            film_scale: Vec::new(),
        };
        let mut h_cur = x.data().to_vec();
        for (spec, off) in self.arch.layers.iter().zip(&self.offsets) {
            let p = &self.params;
            let z = conv_forward(
                &h_cur,
                spec.in_channels,
                h,
                w,
                &p[off.weight..off.weight + spec.out_channels * spec.in_channels * 9],
                &p[off.bias..off.bias + spec.out_channels],
                spec.out_channels,
                spec.dilation,
            );
            tape.inputs.push(std::mem::take(&mut h_cur));
            match off.film {
                None => h_cur = z,
                Some(f) => {
                    let mut a = vec![0.0; z.len()];
                    let mut scales = Vec::with_capacity(spec.out_channels);
                    for c in 0..spec.out_channels {
                        let dot = |wo: usize, bo: usize| {
                            p[bo + c]
                                + (0..e).map(|k| p[wo + c * e + k] * tape.embed[k]).sum::<f64>()
                        };
                        let scale = dot(f.scale_w, f.scale_b);
                        let mut shift = dot(f.shift_w, f.shift_b);
                        if let Some(cls) = class_id {
                            shift += p[f.class_emb + cls * spec.out_channels + c];
                        }
                        scales.push(scale);
                        for idx in c * plane..(c + 1) * plane {
                            a[idx] = z[idx] * (1.0 + scale) + shift;
                        }
                    }
                    h_cur = a.iter().map(|&v| silu(v)).collect();
                    tape.conv_out.push(z);
                    tape.pre_act.push(a);
                    tape.film_scale.push(scales);
                }
            }
        }
        let out_c = self.arch.layers.last().unwrap().out_channels;
        let y = ImageGrid::from_vec(out_c, h, w, h_cur).map_err(|_| Error::NonFinite {
            context: "DenoiserNet::forward".into(),
            detail: format!("non-finite output at sigma={sigma}"),
        })?;
        Ok((y, tape))
    }

    /// Adds the parameter gradient of `⟨forward(x), upstream⟩` into `grad`
    /// and returns the input gradient.
    pub fn backward_from_tape(&self, tape: &Tape, upstream: &ImageGrid, grad: &mut [f64]) -> Result<ImageGrid> {
        let (h, w) = (tape.height, tape.width);
        let out_c = self.arch.layers.last().unwrap().out_channels;
        if upstream.shape() != (out_c, h, w) {
            return Err(Error::Shape {
                expected: format!("{:?}", (out_c, h, w)),
                got: format!("{:?}", upstream.shape()),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::Shape {
                expected: format!("{} gradient entries", self.params.len()),
                got: format!("{}", grad.len()),
            });
        }
        let plane = h * w;
        let e = self.arch.time_embed_dim;
        let p = &self.params;
        let mut g_cur = upstream.data().to_vec();
        let mut film_idx = tape.conv_out.len();
        for (li, (spec, off)) in self.arch.layers.iter().zip(&self.offsets).enumerate().rev() {
            let g_z = match off.film {
                None => g_cur,
                Some(f) => {
                    film_idx -= 1;
                    let z = &tape.conv_out[film_idx];
                    let a = &tape.pre_act[film_idx];
                    let scales = &tape.film_scale[film_idx];
                    let mut g_z = vec![0.0; z.len()];
                    for c in 0..spec.out_channels {
                        let mut g_scale = 0.0;
                        let mut g_shift = 0.0;
                        for idx in c * plane..(c + 1) * plane {
                            let g_a = g_cur[idx] * silu_grad(a[idx]);
                            g_scale += g_a * z[idx];
                            g_shift += g_a;
                            g_z[idx] = g_a * (1.0 + scales[c]);
                        }
                        grad[f.scale_b + c] += g_scale;
                        grad[f.shift_b + c] += g_shift;
                        for k in 0..e {
                            grad[f.scale_w + c * e + k] += g_scale * tape.embed[k];
                            grad[f.shift_w + c * e + k] += g_shift * tape.embed[k];
                        }
                        if let Some(cls) = tape.class_id {
                            grad[f.class_emb + cls * spec.out_channels + c] += g_shift;
                        }
                    }
                    g_z
                }
            };
            let nw = spec.out_channels * spec.in_channels * 9;
            let (gw_part, rest) = grad.split_at_mut(off.bias);
            let grad_weight = &mut gw_part[off.weight..off.weight + nw];
            let grad_bias = &mut rest[..spec.out_channels];
            g_cur = conv_backward(
                &tape.inputs[li],
                &g_z,
                spec.in_channels,
                h,
                w,
                &p[off.weight..off.weight + nw],
                spec.out_channels,
                spec.dilation,
                grad_weight,
                grad_bias,
            );
        }
        ImageGrid::from_vec(self.arch.layers[0].in_channels, h, w, g_cur).map_err(|_| Error::NonFinite {
            context: "DenoiserNet::backward".into(),
            detail: "non-finite input gradient".into(),
        })
    }

    /// Parameter and input gradients of `⟨forward(x, σ, class), upstream⟩`.
    pub fn backward(
        &self,
        x: &ImageGrid,
        sigma: f64,
        class_id: Option<usize>,
        upstream: &ImageGrid,
    ) -> Result<(GradientVector, ImageGrid)> {
        x.check_shape(upstream)?;
        let (_, tape) = self.forward_with_tape(x, sigma, class_id)?;
        let mut g = GradientVector::zeros(self.params.len());
        let gx = self.backward_from_tape(&tape, upstream, &mut g.0)?;
        Ok((g, gx))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + 8 * self.params.len());
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.arch.time_embed_dim as u32).to_le_bytes());
        b.extend_from_slice(&(self.arch.class_count as u32).to_le_bytes());
        b.extend_from_slice(&(self.arch.layers.len() as u32).to_le_bytes());
        for l in &self.arch.layers {
            b.extend_from_slice(&(l.in_channels as u32).to_le_bytes());
            b.extend_from_slice(&(l.out_channels as u32).to_le_bytes());
            b.extend_from_slice(&(l.dilation as u32).to_le_bytes());
            b.push(l.activation as u8);
        }
        b.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            b.extend_from_slice(&p.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, at: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let time_embed_dim = r.u32()? as usize;
        let class_count = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            layers.push(LayerSpec {
                in_channels: r.u32()? as usize,
                out_channels: r.u32()? as usize,
                dilation: r.u32()? as usize,
                activation: r.take(1)?[0] != 0,
            });
        }
        let arch = NetArch {
            layers,
            time_embed_dim,
            class_count,
        };
        arch.validate()?;
        let count = r.u64()? as usize;
        if count != arch.param_count() {
            return Err(Error::Checkpoint(format!(
                "parameter count {count} does not match layer specs ({})",
                arch.param_count()
            )));
        }
        let params = (0..count)
            .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
            .collect::<Result<Vec<_>>>()?;
        if r.at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Self::from_params(arch, params)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Adaptive-moment optimizer with decoupled weight decay and global-norm
/// clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Global norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Clips `grads` to `clip_norm` (if positive) and updates `params`.
    /// Non-finite gradients leave both the parameters and the state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &GradientVector, clip_norm: f64) -> Result<StepReport> {
        if params.len() != self.m.len() || grads.0.len() != self.m.len() {
            return Err(Error::Shape {
                expected: format!("{} parameters", self.m.len()),
                got: format!("{} params / {} grads", params.len(), grads.0.len()),
            });
        }
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                context: "optimizer step skipped".into(),
                detail: format!("gradient norm {norm}"),
            });
        }
        let clipped = clip_norm > 0.0 && norm > clip_norm;
        let factor = if clipped { clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads.0[i] * factor;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
        Ok(StepReport {
            grad_norm: norm,
            clipped,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error over probed coordinates.
    pub max_rel_error: f64,
    pub probed: usize,
    pub passed: bool,
}

/// Relative error with a floor so coordinates whose true gradient is
/// numerically zero do not dominate.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Finite-difference probe settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub resolution: usize,
    /// Parameters probed; all of them when this is at least the parameter count.
    pub probes: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            resolution: 6,
            probes: usize::MAX,
            step: 1e-4,
            tolerance: 1e-4,
        }
    }
}

/// Compares [`DenoiserNet::backward`] against central differences of
/// `⟨forward(x), u⟩` for random `x`, `u`. Input gradients are always probed
/// in full.
pub fn gradient_check(net: &DenoiserNet, cfg: GradCheckConfig, rng: &mut SeededRng) -> Result<GradCheckReport> {
    gradient_check_with(net, cfg, rng, |_| {})
}

/// As [`gradient_check`], with a hook that may tamper with the analytic
/// parameter gradient (negative controls).
pub fn gradient_check_with(
    net: &DenoiserNet,
    cfg: GradCheckConfig,
    rng: &mut SeededRng,
    tamper: impl FnOnce(&mut GradientVector),
) -> Result<GradCheckReport> {
    let GradCheckConfig {
        resolution: res,
        probes,
        step: h,
        tolerance,
    } = cfg;
    let c = net.arch.layers[0].in_channels;
    let x = crate::grid::gaussian_noise((c, res, res), rng);
    let u = crate::grid::gaussian_noise((c, res, res), rng);
    let sigma = rng.uniform_range(0.05, 0.95);
    let class_id = (net.arch.class_count > 0).then(|| rng.below(net.arch.class_count));
    let (mut g, gx) = net.backward(&x, sigma, class_id, &u)?;
    tamper(&mut g);
    let objective = |n: &DenoiserNet, x: &ImageGrid| -> Result<f64> { Ok(n.forward(x, sigma, class_id)?.dot(&u)) };

    let scale = g.0.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let floor = 1e-6 * scale.max(1.0);
    let indices: Vec<usize> = if probes >= net.param_count() {
        (0..net.param_count()).collect()
    } else {
        (0..probes).map(|_| rng.below(net.param_count())).collect()
    };
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for &i in &indices {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let fp = objective(&probe, &x)?;
        probe.params[i] = orig - h;
        let fm = objective(&probe, &x)?;
        probe.params[i] = orig;
        worst = worst.max(rel_error(g.0[i], (fp - fm) / (2.0 * h), floor));
    }
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = objective(net, &xp)?;
        xp.data_mut()[i] = orig - h;
        let fm = objective(net, &xp)?;
        xp.data_mut()[i] = orig;
        worst = worst.max(rel_error(gx.data()[i], (fp - fm) / (2.0 * h), floor));
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        probed: indices.len() + x.len(),
        passed: worst < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::gaussian_noise;

    fn small_arch() -> NetArch {
        NetArch::standard(1, 6, &[1, 2, 1], 3)
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenoiserNet::zeros(small_arch()).unwrap();
        let x = gaussian_noise((1, 8, 8), &mut SeededRng::new(1));
        let y = net.forward(&x, 0.3, Some(2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resolution_agnostic() {
        let net = DenoiserNet::init(small_arch(), &mut SeededRng::new(2), 1.0).unwrap();
        for res in [8, 16] {
            let x = gaussian_noise((1, res, res), &mut SeededRng::new(3));
            let y = net.forward(&x, 0.5, Some(0)).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.is_finite());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = DenoiserNet::init(small_arch(), &mut SeededRng::new(2), 1.0).unwrap();
        let x = ImageGrid::zeros(1, 8, 8);
        assert!(matches!(net.forward(&x, 0.5, Some(3)), Err(Error::ClassOutOfRange { .. })));
        assert!(net.forward(&x, 1.5, None).is_err());
        assert!(net.forward(&ImageGrid::zeros(2, 8, 8), 0.5, None).is_err());
        assert!(net.backward(&x, 0.5, None, &ImageGrid::zeros(1, 4, 4)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = DenoiserNet::init(small_arch(), &mut SeededRng::new(4), 1.0).unwrap();
        let x = gaussian_noise((1, 8, 8), &mut SeededRng::new(5));
        let (g, gx) = net.backward(&x, 0.4, Some(1), &ImageGrid::zeros(1, 8, 8)).unwrap();
        assert!(g.0.iter().all(|&v| v == 0.0));
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_conv_gradient_is_correlation() {
        let arch = NetArch {
            layers: vec![LayerSpec {
                in_channels: 1,
                out_channels: 1,
                dilation: 1,
                activation: false,
            }],
            time_embed_dim: 2,
            class_count: 0,
        };
        let net = DenoiserNet::init(arch, &mut SeededRng::new(6), 1.0).unwrap();
        let x = gaussian_noise((1, 5, 5), &mut SeededRng::new(7));
        let u = gaussian_noise((1, 5, 5), &mut SeededRng::new(8));
        let (g, _) = net.backward(&x, 0.5, None, &u).unwrap();
        // dL/dw[ky][kx] = Σ u[y][x] · x[y+ky-1][x+kx-1] with zero padding
        for ky in 0..3 {
            for kx in 0..3 {
                let mut s = 0.0;
                for y in 0..5i32 {
                    for xx in 0..5i32 {
                        let (sy, sx) = (y + ky as i32 - 1, xx + kx as i32 - 1);
                        if (0..5).contains(&sy) && (0..5).contains(&sx) {
                            s += u.at(0, y as usize, xx as usize) * x.at(0, sy as usize, sx as usize);
                        }
                    }
                }
                assert!((g.0[ky * 3 + kx] - s).abs() < 1e-12);
            }
        }
        assert!((g.0[9] - u.data().iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn gradient_check_linear_is_exact() {
        let arch = NetArch {
            layers: vec![
                LayerSpec { in_channels: 1, out_channels: 4, dilation: 1, activation: false },
                LayerSpec { in_channels: 4, out_channels: 1, dilation: 2, activation: false },
            ],
            time_embed_dim: 2,
            class_count: 0,
        };
        let net = DenoiserNet::init(arch, &mut SeededRng::new(9), 1.0).unwrap();
        let r = gradient_check(
            &net,
            GradCheckConfig { step: 1.0, tolerance: 1e-10, ..Default::default() },
            &mut SeededRng::new(10),
        ).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn gradient_check_nonlinear() {
        let net = DenoiserNet::init(small_arch(), &mut SeededRng::new(11), 1.0).unwrap();
        let r = gradient_check(&net, GradCheckConfig::default(), &mut SeededRng::new(12)).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn gradient_check_detects_corruption() {
        let net = DenoiserNet::init(small_arch(), &mut SeededRng::new(11), 1.0).unwrap();
        let r = gradient_check_with(&net, GradCheckConfig::default(), &mut SeededRng::new(12), |g| {
            g.0[3] += 0.5;
        })
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let net = DenoiserNet::init(small_arch(), &mut SeededRng::new(13), 1.0).unwrap();
        let x = gaussian_noise((1, 8, 8), &mut SeededRng::new(14));
        let u = gaussian_noise((1, 8, 8), &mut SeededRng::new(15));
        let a = net.backward(&x, 0.7, Some(0), &u).unwrap();
        let b = net.backward(&x, 0.7, Some(0), &u).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adamw_zero_gradient_is_noop() {
        let mut p = vec![0.5, -1.0];
        let mut opt = AdamW::new(2, 1e-3, 0.9, 0.999, 0.0);
        opt.step(&mut p, &GradientVector(vec![0.0, 0.0]), 1.0).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn adamw_clips_global_norm() {
        let mut p = vec![0.0, 0.0];
        // β1 = 0 exposes the clipped gradient in the first moment
        let mut opt = AdamW::new(2, 1.0, 0.0, 0.0, 0.0);
        let r = opt.step(&mut p, &GradientVector(vec![6.0, 8.0]), 1.0).unwrap();
        assert_eq!(r.grad_norm, 10.0);
        assert!(r.clipped);
        assert!((opt.m[0] - 0.6).abs() < 1e-15 && (opt.m[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adamw_matches_hand_recurrence() {
        // lr=0.1, β1=0.9, β2=0.999, eps=1e-8, g=2 constant; hand-computed:
        // step1: m=0.2 v=0.004 m̂=2 v̂=4 -> Δ=0.1*2/(2+1e-8)
        // step2: m=0.38 v=0.007996 m̂=2 v̂=4 -> same Δ; step3 likewise
        let mut p = vec![1.0];
        let mut opt = AdamW::new(1, 0.1, 0.9, 0.999, 0.0);
        let mut expected = 1.0;
        for _ in 0..3 {
            opt.step(&mut p, &GradientVector(vec![2.0]), 0.0).unwrap();
            expected -= 0.1 * 2.0 / (2.0 + 1e-8);
            assert!((p[0] - expected).abs() < 1e-12, "{} vs {}", p[0], expected);
        }
        assert!((opt.m[0] - 0.542).abs() < 1e-12);
        assert!((opt.v[0] - 0.011988004).abs() < 1e-12);
    }

    #[test]
    fn adamw_weight_decay_is_decoupled() {
        let mut p = vec![2.0];
        let mut opt = AdamW::new(1, 0.1, 0.0, 0.999, 0.5);
        opt.step(&mut p, &GradientVector(vec![0.0]), 1.0).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn adamw_skips_non_finite() {
        let mut p = vec![1.0];
        let mut opt = AdamW::new(1, 0.1, 0.9, 0.999, 0.0);
        assert!(opt.step(&mut p, &GradientVector(vec![f64::NAN]), 1.0).is_err());
        assert_eq!(p, vec![1.0]);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn checkpoint_round_trip_and_version_guard() {
        let net = DenoiserNet::init(small_arch(), &mut SeededRng::new(16), 1.0).unwrap();
        let bytes = net.to_bytes();
        assert_eq!(DenoiserNet::from_bytes(&bytes).unwrap(), net);
        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(matches!(DenoiserNet::from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(DenoiserNet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
