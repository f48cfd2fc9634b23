//! Procedural two-resolution shape dataset.
//!
//! The high tier holds clean 16×16 anti-aliased renders. The low tier holds
//! 8×8 renders of the same pose distribution corrupted per sample by an
//! intensity shift, an optional blur, an additive haze and pixel noise, then
//! clamped to `[0, 1]`. The corruption is the controlled gap between the two tiers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, SeededRng};

pub const CLASS_NAMES: [&str; 3] = ["disc", "rectangle", "cross"];
pub const CLASS_COUNT: usize = 3;

const SUPERSAMPLE: usize = 8;
const DATASET_MAGIC: &str = "rmd-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    Low,
    High,
}

/// Shape placement in normalized canvas coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapePose {
    pub cx: f64,
    pub cy: f64,
    /// Extent as a fraction of the canvas side.
    pub size: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSample {
    pub image: ImageGrid,
    pub class_id: usize,
    pub tier: Tier,
    /// Pixel-noise standard deviation applied; 0 for the high tier.
    pub quality_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataParams {
    pub high_per_class: usize,
    pub low_per_class: usize,
    pub high_res: usize,
    pub low_res: usize,
    /// Centre drawn uniformly in `0.5 ± center_spread`.
    pub center_spread: f64,
    pub size_min: f64,
    pub size_max: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    /// Upper end of the per-sample noise std range `[0, noise_std_max]`.
    pub noise_std_max: f64,
    pub blur_prob: f64,
    /// Additive intensity shift drawn from `±intensity_jitter`.
    pub intensity_jitter: f64,
    /// Whole-image additive offset drawn from `[0, haze_max]`.
    pub haze_max: f64,
    /// Multiplies every low-tier corruption; 0 disables them.
    pub jitter_scale: f64,
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            high_per_class: 256,
            low_per_class: 512,
            high_res: 16,
            low_res: 8,
            center_spread: 0.1,
            size_min: 0.45,
            size_max: 0.85,
            intensity_min: 0.5,
            intensity_max: 1.0,
            noise_std_max: 0.15,
            blur_prob: 0.5,
            intensity_jitter: 0.2,
            haze_max: 0.1,
            jitter_scale: 1.0,
        }
    }
}

impl DataParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("data.{key}"), msg))
            }
        };
        check(self.high_per_class > 0, "high_per_class", "must be positive")?;
        check(self.low_per_class > 0, "low_per_class", "must be positive")?;
        check(
            self.low_res > 1 && self.high_res > self.low_res,
            "low_res",
            "need 1 < low_res < high_res",
        )?;
        check(
            (0.0..0.5).contains(&self.center_spread),
            "center_spread",
            "must lie in [0, 0.5)",
        )?;
        check(
            self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max <= 1.0,
            "size_min",
            "need 0 < size_min <= size_max <= 1",
        )?;
        check(
            0.0 < self.intensity_min && self.intensity_min <= self.intensity_max && self.intensity_max <= 1.0,
            "intensity_min",
            "need 0 < intensity_min <= intensity_max <= 1",
        )?;
        check(
            (0.0..=1.0).contains(&self.noise_std_max),
            "noise_std_max",
            "must lie in [0, 1]",
        )?;
        check((0.0..=1.0).contains(&self.blur_prob), "blur_prob", "must lie in [0, 1]")?;
        check(
            (0.0..=1.0).contains(&self.intensity_jitter),
            "intensity_jitter",
            "must lie in [0, 1]",
        )?;
        check((0.0..=1.0).contains(&self.haze_max), "haze_max", "must lie in [0, 1]")?;
        check(
            self.jitter_scale >= 0.0 && self.jitter_scale.is_finite(),
            "jitter_scale",
            "must be a finite non-negative number",
        )
    }
}

fn inside(class_id: usize, px: f64, py: f64, pose: &ShapePose) -> bool {
    let (dx, dy) = ((px - pose.cx).abs(), (py - pose.cy).abs());
    let half = pose.size / 2.0;
    match class_id {
        0 => dx * dx + dy * dy <= half * half,
        1 => dx <= half && dy <= 0.6 * half,
        _ => {
            let bar = pose.size / 6.0;
            (dx <= half && dy <= bar) || (dy <= half && dx <= bar)
        }
    }
}

/// Anti-aliased render by `8×8` supersampling per pixel.
pub fn render_shape(class_id: usize, pose: &ShapePose, res: usize) -> Result<ImageGrid> {
    if class_id >= CLASS_COUNT {
        return Err(Error::ClassOutOfRange {
            class_id,
            count: CLASS_COUNT,
        });
    }
    if !(0.0..=1.0).contains(&pose.cx) || !(0.0..=1.0).contains(&pose.cy) || pose.size > 1.0 {
        return Err(Error::Invalid(format!("pose outside canvas: {pose:?}")));
    }
    if pose.size * res as f64 <= 1.0 {
        return Err(Error::Invalid(format!(
            "degenerate shape: size {} at {res}px covers at most one pixel",
            pose.size
        )));
    }
    if !(0.5..=1.0).contains(&pose.intensity) {
        return Err(Error::Invalid(format!(
            "intensity {} outside [0.5, 1]",
            pose.intensity
        )));
    }
    let mut img = ImageGrid::zeros(1, res, res);
    let inv = 1.0 / (res * SUPERSAMPLE) as f64;
    let norm = pose.intensity / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..res {
        for x in 0..res {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                let py = ((y * SUPERSAMPLE + sy) as f64 + 0.5) * inv;
                for sx in 0..SUPERSAMPLE {
                    let px = ((x * SUPERSAMPLE + sx) as f64 + 0.5) * inv;
                    hits += inside(class_id, px, py, pose) as usize;
                }
            }
            *img.at_mut(0, y, x) = hits as f64 * norm;
        }
    }
    Ok(img)
}

/// Separable `[1, 2, 1] / 4` blur with edge replication.
fn blur(x: &ImageGrid) -> ImageGrid {
    let (c, h, w) = x.shape();
    let pass = |src: &ImageGrid, horizontal: bool| {
        let mut out = ImageGrid::zeros(c, h, w);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let get = |o: isize| {
                        if horizontal {
                            let i = (xx as isize + o).clamp(0, w as isize - 1) as usize;
                            src.at(ch, y, i)
                        } else {
                            let i = (y as isize + o).clamp(0, h as isize - 1) as usize;
                            src.at(ch, i, xx)
                        }
                    };
                    *out.at_mut(ch, y, xx) = 0.25 * get(-1) + 0.5 * get(0) + 0.25 * get(1);
                }
            }
        }
        out
    };
    pass(&pass(x, true), false)
}

fn draw_pose(p: &DataParams, rng: &mut SeededRng) -> ShapePose {
    ShapePose {
        cx: 0.5 + rng.uniform_range(-p.center_spread, p.center_spread),
        cy: 0.5 + rng.uniform_range(-p.center_spread, p.center_spread),
        size: rng.uniform_range(p.size_min, p.size_max),
        intensity: rng.uniform_range(p.intensity_min, p.intensity_max),
    }
}

pub fn high_sample(p: &DataParams, class_id: usize, rng: &mut SeededRng) -> Result<ShapeSample> {
    let pose = draw_pose(p, rng);
    Ok(ShapeSample {
        image: render_shape(class_id, &pose, p.high_res)?,
        class_id,
        tier: Tier::High,
        quality_jitter: 0.0,
    })
}

pub fn low_sample(p: &DataParams, class_id: usize, rng: &mut SeededRng) -> Result<ShapeSample> {
    let pose = draw_pose(p, rng);
    let s = p.jitter_scale;
    let shift = s * rng.uniform_range(-p.intensity_jitter, p.intensity_jitter);
    let do_blur = rng.uniform() < p.blur_prob;
    let noise_std = s * rng.uniform_range(0.0, p.noise_std_max);
    let haze = s * rng.uniform_range(0.0, p.haze_max);
    let mut img = render_shape(class_id, &pose, p.low_res)?;
    if s > 0.0 {
        // the shift applies to the shape only, background stays at 0
        let base = pose.intensity;
        img = img.map(|v| v * (base + shift) / base);
        if do_blur {
            img = blur(&img);
        }
        let mut noisy = img.clone();
        for v in noisy.data_mut() {
            *v += haze + noise_std * rng.normal();
        }
        img = noisy.clamp(0.0, 1.0);
    }
    Ok(ShapeSample {
        image: img,
        class_id,
        tier: Tier::Low,
        quality_jitter: noise_std,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub params: DataParams,
    pub seed: u64,
    pub high: Vec<ShapeSample>,
    pub low: Vec<ShapeSample>,
}

/// Classes cycle `0, 1, 2, 0, ...` within each tier; every sample draws from
/// its own stream derived from `(seed, tier, index)`.
pub fn gen_dataset(p: &DataParams, seed: u64) -> Result<Dataset> {
    p.validate()?;
    let root = SeededRng::new(seed);
    let high = (0..p.high_per_class * CLASS_COUNT)
        .map(|i| high_sample(p, i % CLASS_COUNT, &mut root.derive_indexed("high", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let low = (0..p.low_per_class * CLASS_COUNT)
        .map(|i| low_sample(p, i % CLASS_COUNT, &mut root.derive_indexed("low", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        params: p.clone(),
        seed,
        high,
        low,
    })
}

/// Header fields of a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub fields: BTreeMap<String, String>,
    pub offset_high: usize,
    pub offset_low: usize,
    pub record_bytes_high: usize,
    pub record_bytes_low: usize,
    pub count_high: usize,
    pub count_low: usize,
}

fn record_bytes(res: usize) -> usize {
    1 + 1 + 8 + 8 * res * res
}

fn push_record(buf: &mut Vec<u8>, s: &ShapeSample) {
    buf.push(s.class_id as u8);
    buf.push(match s.tier {
        Tier::Low => 0,
        Tier::High => 1,
    });
    buf.extend_from_slice(&s.quality_jitter.to_le_bytes());
    for v in s.image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Dataset {
    pub fn high_images(&self) -> Vec<ImageGrid> {
        self.high.iter().map(|s| s.image.clone()).collect()
    }

    pub fn low_images(&self) -> Vec<ImageGrid> {
        self.low.iter().map(|s| s.image.clone()).collect()
    }

    /// Text header of `key=value` lines ending in `end`, followed by the
    /// high-tier records, then the low-tier records. Offsets are written
    /// zero-padded so the header length does not depend on them.
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut fields: Vec<(String, String)> = vec![
            ("version".into(), DATASET_VERSION.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("high_res".into(), p.high_res.to_string()),
            ("low_res".into(), p.low_res.to_string()),
            ("count_high".into(), self.high.len().to_string()),
            ("count_low".into(), self.low.len().to_string()),
        ];
        for c in 0..CLASS_COUNT {
            let n = |v: &[ShapeSample]| v.iter().filter(|s| s.class_id == c).count();
            fields.push((format!("count_high_class{c}"), n(&self.high).to_string()));
            fields.push((format!("count_low_class{c}"), n(&self.low).to_string()));
        }
        fields.extend([
            ("center_spread".into(), p.center_spread.to_string()),
            ("size_min".into(), p.size_min.to_string()),
            ("size_max".into(), p.size_max.to_string()),
            ("intensity_min".into(), p.intensity_min.to_string()),
            ("intensity_max".into(), p.intensity_max.to_string()),
            ("noise_std_max".into(), p.noise_std_max.to_string()),
            ("blur_prob".into(), p.blur_prob.to_string()),
            ("intensity_jitter".into(), p.intensity_jitter.to_string()),
            ("haze_max".into(), p.haze_max.to_string()),
            ("jitter_scale".into(), p.jitter_scale.to_string()),
            ("record_bytes_high".into(), record_bytes(p.high_res).to_string()),
            ("record_bytes_low".into(), record_bytes(p.low_res).to_string()),
        ]);
        let body: String = fields.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let header = |offset_high: usize, offset_low: usize| {
            format!("{DATASET_MAGIC}\n{body}offset_high={offset_high:020}\noffset_low={offset_low:020}\nend\n")
        };
        let head_len = header(0, 0).len();
        let offset_high = head_len;
        let offset_low = offset_high + self.high.len() * record_bytes(p.high_res);
        let mut out = header(offset_high, offset_low).into_bytes();
        debug_assert_eq!(out.len(), head_len);
        for s in &self.high {
            push_record(&mut out, s);
        }
        for s in &self.low {
            push_record(&mut out, s);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<DatasetManifest> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        parse_manifest(&bytes)
    }

    pub fn read(path: &Path) -> Result<Dataset> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let m = parse_manifest(bytes)?;
        let get = |k: &str| -> Result<String> {
            m.fields
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Dataset(format!("missing header field {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|e| Error::Dataset(format!("{k}: {e}")))
        };
        let high_res = num("high_res")? as usize;
        let low_res = num("low_res")? as usize;
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|e| Error::Dataset(format!("seed: {e}")))?;
        let per_class = |tier: &str| -> Result<usize> { Ok(num(&format!("count_{tier}_class0"))? as usize) };
        let params = DataParams {
            high_per_class: per_class("high")?,
            low_per_class: per_class("low")?,
            high_res,
            low_res,
            center_spread: num("center_spread")?,
            size_min: num("size_min")?,
            size_max: num("size_max")?,
            intensity_min: num("intensity_min")?,
            intensity_max: num("intensity_max")?,
            noise_std_max: num("noise_std_max")?,
            blur_prob: num("blur_prob")?,
            intensity_jitter: num("intensity_jitter")?,
            haze_max: num("haze_max")?,
            jitter_scale: num("jitter_scale")?,
        };
        let read_tier = |offset: usize, count: usize, res: usize, tier: Tier| -> Result<Vec<ShapeSample>> {
            let rb = record_bytes(res);
            (0..count)
                .map(|i| {
                    let r = &bytes[offset + i * rb..offset + (i + 1) * rb];
                    let class_id = r[0] as usize;
                    let tier_byte = r[1];
                    let expected = if tier == Tier::High { 1 } else { 0 };
                    if class_id >= CLASS_COUNT || tier_byte != expected {
                        return Err(Error::Dataset(format!("corrupt record {i} at offset {offset}")));
                    }
                    let jitter = f64::from_le_bytes(r[2..10].try_into().unwrap());
                    let data = r[10..]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Ok(ShapeSample {
                        image: ImageGrid::from_vec(1, res, res, data)?,
                        class_id,
                        tier,
                        quality_jitter: jitter,
                    })
                })
                .collect()
        };
        let high = read_tier(m.offset_high, m.count_high, high_res, Tier::High)?;
        let low = read_tier(m.offset_low, m.count_low, low_res, Tier::Low)?;
        Ok(Dataset {
            params,
            seed,
            high,
            low,
        })
    }
}

pub fn parse_manifest(bytes: &[u8]) -> Result<DatasetManifest> {
    let mut fields = BTreeMap::new();
    let mut at = 0;
    let mut first = true;
    loop {
        let end = bytes[at..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Dataset("unterminated header".into()))?;
        let line = std::str::from_utf8(&bytes[at..at + end]).map_err(|_| Error::Dataset("header is not UTF-8".into()))?;
        at += end + 1;
        if first {
            if line != DATASET_MAGIC {
                return Err(Error::Dataset(format!("bad magic line {line:?}")));
            }
            first = false;
            continue;
        }
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Dataset(format!("malformed header line {line:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let num = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .ok_or_else(|| Error::Dataset(format!("missing header field {k}")))?
            .parse::<usize>()
            .map_err(|e| Error::Dataset(format!("{k}: {e}")))
    };
    if num("version")? != DATASET_VERSION as usize {
        return Err(Error::Dataset(format!("unsupported version {}", fields["version"])));
    }
    let (high_res, low_res) = (num("high_res")?, num("low_res")?);
    let m = DatasetManifest {
        offset_high: num("offset_high")?,
        offset_low: num("offset_low")?,
        record_bytes_high: num("record_bytes_high")?,
        record_bytes_low: num("record_bytes_low")?,
        count_high: num("count_high")?,
        count_low: num("count_low")?,
        fields,
    };
    let consistent = m.offset_high == at
        && m.record_bytes_high == record_bytes(high_res)
        && m.record_bytes_low == record_bytes(low_res)
        && m.offset_low == m.offset_high + m.count_high * m.record_bytes_high
        && bytes.len() == m.offset_low + m.count_low * m.record_bytes_low;
    if !consistent {
        return Err(Error::Dataset("offsets inconsistent with record sizes".into()));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::area_downsample;

    fn pose(size: f64) -> ShapePose {
        ShapePose {
            cx: 0.5,
            cy: 0.5,
            size,
            intensity: 1.0,
        }
    }

    #[test]
    fn full_canvas_disc_center_is_one() {
        let img = render_shape(0, &pose(1.0), 16).unwrap();
        assert_eq!(img.at(0, 8, 8), 1.0);
        assert_eq!(img.at(0, 7, 7), 1.0);
        assert!(img.at(0, 0, 0) < 0.2);
    }

    #[test]
    fn render_is_resolution_consistent() {
        for class_id in 0..CLASS_COUNT {
            let p = ShapePose {
                cx: 0.46,
                cy: 0.55,
                size: 0.63,
                intensity: 0.8,
            };
            let hi = render_shape(class_id, &p, 16).unwrap();
            let lo = render_shape(class_id, &p, 8).unwrap();
            let down = area_downsample(&hi, 2).unwrap();
            assert!(down.max_abs_diff(&lo) < 0.1, "class {class_id}");
        }
    }

    #[test]
    fn rectangle_is_axis_aligned_mask() {
        // exact pixel edges: x in [4, 12), y in [5.6, 10.4) on a 16 grid
        let img = render_shape(1, &pose(0.5), 16).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let v = img.at(0, y, x);
                if (4..12).contains(&x) && (6..10).contains(&y) {
                    assert_eq!(v, 1.0);
                } else if !(4..12).contains(&x) || !(5..11).contains(&y) {
                    assert_eq!(v, 0.0);
                }
            }
        }
        // row sums are symmetric
        assert!((img.at(0, 5, 8) - img.at(0, 10, 8)).abs() < 1e-12);
    }

    #[test]
    fn render_rejects_bad_poses() {
        assert!(render_shape(0, &pose(1.0 / 16.0), 16).is_err());
        assert!(render_shape(3, &pose(0.5), 16).is_err());
        assert!(render_shape(0, &ShapePose { cx: 1.2, ..pose(0.5) }, 16).is_err());
    }

    #[test]
    fn zero_jitter_low_tier_is_clean() {
        let p = DataParams {
            jitter_scale: 0.0,
            high_per_class: 2,
            low_per_class: 4,
            ..Default::default()
        };
        let ds = gen_dataset(&p, 3).unwrap();
        for (i, s) in ds.low.iter().enumerate() {
            let mut rng = SeededRng::new(3).derive_indexed("low", i as u64);
            let pose = draw_pose(&p, &mut rng);
            assert_eq!(s.image, render_shape(s.class_id, &pose, 8).unwrap());
            assert_eq!(s.quality_jitter, 0.0);
        }
    }

    #[test]
    fn low_tier_mean_is_shifted() {
        let ds = gen_dataset(&DataParams::default(), 11).unwrap();
        let low_mean = ds.low.iter().map(|s| s.image.mean()).sum::<f64>() / ds.low.len() as f64;
        let high_down_mean = ds
            .high
            .iter()
            .map(|s| area_downsample(&s.image, 2).unwrap().mean())
            .sum::<f64>()
            / ds.high.len() as f64;
        assert!((low_mean - high_down_mean).abs() > 0.02, "{low_mean} vs {high_down_mean}");
    }

    #[test]
    fn file_round_trip_and_determinism() {
        let p = DataParams {
            high_per_class: 3,
            low_per_class: 5,
            ..Default::default()
        };
        let a = gen_dataset(&p, 42).unwrap();
        let b = gen_dataset(&p, 42).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let back = Dataset::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, a);
        let m = parse_manifest(&a.to_bytes()).unwrap();
        assert_eq!(m.count_high, 9);
        assert_eq!(m.count_low, 15);
        assert_eq!(m.fields["count_low_class1"], "5");
    }

    #[test]
    fn corrupted_file_is_rejected() {
        let p = DataParams {
            high_per_class: 1,
            low_per_class: 1,
            ..Default::default()
        };
        let bytes = gen_dataset(&p, 1).unwrap().to_bytes();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Dataset::from_bytes(&bad).is_err());
    }

    #[test]
    fn invalid_params_name_the_key() {
        let p = DataParams {
            noise_std_max: -0.1,
            ..Default::default()
        };
        match gen_dataset(&p, 0) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "data.noise_std_max"),
            other => panic!("{other:?}"),
        }
    }
}
