//! Rasters, resampling and noise.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A `channels × height × width` raster stored channel-major, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty grid");
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        let mut g = Self::zeros(channels, height, width);
        g.data.fill(value);
        g
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "grid dimensions must be positive: {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape {
                expected: format!("{} values", channels * height * width),
                got: format!("{} values", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "ImageGrid::from_vec".into(),
                detail: format!("{v}"),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Same shape as `self`, new contents.
    fn with_data(&self, data: Vec<f64>) -> ImageGrid {
        debug_assert_eq!(data.len(), self.data.len());
        ImageGrid {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_shape(&self, other: &ImageGrid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape {
                expected: format!("{:?}", self.shape()),
                got: format!("{:?}", other.shape()),
            })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    /// `a·self + b·other`.
    pub fn lin_comb(&self, a: f64, other: &ImageGrid, b: f64) -> ImageGrid {
        debug_assert!(self.same_shape(other));
        self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        )
    }

    /// `self += a·other`.
    pub fn axpy(&mut self, a: f64, other: &ImageGrid) {
        debug_assert!(self.same_shape(other));
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn scale(&self, a: f64) -> ImageGrid {
        self.map(|v| a * v)
    }

    pub fn add(&self, other: &ImageGrid) -> ImageGrid {
        self.lin_comb(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &ImageGrid) -> ImageGrid {
        self.lin_comb(1.0, other, -1.0)
    }

    pub fn dot(&self, other: &ImageGrid) -> f64 {
        self.data.iter().zip(&other.data).map(|(x, y)| x * y).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> ImageGrid {
        self.map(|v| v.clamp(lo, hi))
    }
}

/// Source coordinate and weights for half-pixel-centre linear interpolation
/// along one axis: `(i0, i1, w1)` with output `= (1 - w1)·src[i0] + w1·src[i1]`.
fn linear_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Per-channel bilinear interpolation, align-corners off.
pub fn bilinear_upsample(x: &ImageGrid, target_h: usize, target_w: usize) -> Result<ImageGrid> {
    if target_h < x.height || target_w < x.width {
        return Err(Error::Invalid(format!(
            "upsample target {target_h}x{target_w} smaller than source {}x{}",
            x.height, x.width
        )));
    }
    let ty = linear_taps(x.height, target_h);
    let tx = linear_taps(x.width, target_w);
    let mut out = ImageGrid::zeros(x.channels, target_h, target_w);
    for c in 0..x.channels {
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = (1.0 - wx) * x.at(c, y0, x0) + wx * x.at(c, y0, x1);
                let bot = (1.0 - wx) * x.at(c, y1, x0) + wx * x.at(c, y1, x1);
                *out.at_mut(c, oy, ox) = (1.0 - wy) * top + wy * bot;
            }
        }
    }
    Ok(out)
}

/// Transpose of [`bilinear_upsample`]: scatters `y` back onto a
/// `source_h × source_w` grid with the same weights.
pub fn bilinear_upsample_adjoint(y: &ImageGrid, source_h: usize, source_w: usize) -> Result<ImageGrid> {
    if source_h > y.height || source_w > y.width || source_h == 0 || source_w == 0 {
        return Err(Error::Invalid(format!(
            "adjoint source {source_h}x{source_w} incompatible with {}x{}",
            y.height, y.width
        )));
    }
    let ty = linear_taps(source_h, y.height);
    let tx = linear_taps(source_w, y.width);
    let mut out = ImageGrid::zeros(y.channels, source_h, source_w);
    for c in 0..y.channels {
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = y.at(c, oy, ox);
                *out.at_mut(c, y0, x0) += (1.0 - wy) * (1.0 - wx) * g;
                *out.at_mut(c, y0, x1) += (1.0 - wy) * wx * g;
                *out.at_mut(c, y1, x0) += wy * (1.0 - wx) * g;
                *out.at_mut(c, y1, x1) += wy * wx * g;
            }
        }
    }
    Ok(out)
}

/// Upsamples to `(h, w)`, or clones when the grid is already that size.
pub fn upsample_to(x: &ImageGrid, h: usize, w: usize) -> Result<ImageGrid> {
    if x.height == h && x.width == w {
        Ok(x.clone())
    } else {
        bilinear_upsample(x, h, w)
    }
}

/// Block-mean downsampling.
pub fn area_downsample(x: &ImageGrid, factor: usize) -> Result<ImageGrid> {
    if factor == 0 || x.height % factor != 0 || x.width % factor != 0 {
        return Err(Error::Invalid(format!(
            "{}x{} not divisible by factor {factor}",
            x.height, x.width
        )));
    }
    let (h, w) = (x.height / factor, x.width / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = ImageGrid::zeros(x.channels, h, w);
    for c in 0..x.channels {
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += x.at(c, y * factor + dy, xx * factor + dx);
                    }
                }
                *out.at_mut(c, y, xx) = s * norm;
            }
        }
    }
    Ok(out)
}

/// Deterministic random source: ChaCha8 seeded from a 64-bit integer, with a
/// Box-Muller Gaussian transform on top.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for `label`, derived from this generator's seed only
    /// (not its position).
    pub fn derive(&self, label: &str) -> SeededRng {
        SeededRng::new(derive_seed(self.seed, label))
    }

    pub fn derive_indexed(&self, label: &str, index: u64) -> SeededRng {
        SeededRng::new(derive_seed(self.seed, &format!("{label}/{index}")))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// SHA-256 of `seed ‖ label`, truncated to 64 bits.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn gaussian_noise(shape: (usize, usize, usize), rng: &mut SeededRng) -> ImageGrid {
    let (c, h, w) = shape;
    let data = (0..c * h * w).map(|_| rng.normal()).collect();
    ImageGrid::from_vec(c, h, w, data).expect("finite gaussian draws")
}

/// Writes a binary PGM (1 channel) or PPM (3 channels), mapping `[lo, hi]`
/// onto `0..=255`, plus a `<path>.txt` sidecar recording the range.
pub fn write_pnm(path: &Path, x: &ImageGrid, lo: f64, hi: f64) -> Result<()> {
    let magic = match x.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Invalid(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    if !(hi > lo) {
        return Err(Error::Invalid(format!("empty intensity range [{lo}, {hi}]")));
    }
    let mut bytes = format!("{magic}\n{} {}\n255\n", x.width, x.height).into_bytes();
    let plane = x.height * x.width;
    for i in 0..plane {
        for c in 0..x.channels {
            let v = (x.data[c * plane + i] - lo) / (hi - lo);
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;

    let sidecar = path.with_extension(format!(
        "{}.txt",
        path.extension().and_then(|e| e.to_str()).unwrap_or("pnm")
    ));
    let text = format!(
        "format={magic}\nwidth={}\nheight={}\nchannels={}\nrange_lo={lo}\nrange_hi={hi}\n",
        x.width, x.height, x.channels
    );
    fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
}

/// Tiles equally sized grids into a `cols`-wide contact sheet with a 1-pixel
/// gutter filled with `gutter`.
pub fn contact_sheet(tiles: &[ImageGrid], cols: usize, gutter: f64) -> Result<ImageGrid> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::Invalid("contact sheet needs at least one tile".into()))?;
    let (c, h, w) = first.shape();
    if let Some(bad) = tiles.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::Shape {
            expected: format!("{:?}", first.shape()),
            got: format!("{:?}", bad.shape()),
        });
    }
    let cols = cols.max(1).min(tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let (sh, sw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut sheet = ImageGrid::filled(c, sh, sw, gutter);
    for (n, t) in tiles.iter().enumerate() {
        let (oy, ox) = ((n / cols) * (h + 1) + 1, (n % cols) * (w + 1) + 1);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *sheet.at_mut(ch, oy + y, ox + x) = t.at(ch, y, x);
                }
            }
        }
    }
    Ok(sheet)
}
