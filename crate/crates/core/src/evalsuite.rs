//! Two-sample distances, summary statistics, report emission and the
//! analytic cost model behind speedup figures.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{contact_sheet, write_pnm, ImageGrid, SeededRng};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    TeacherHighres,
    TeacherUpsampled,
    StudentCascade,
    NoRmCascade,
    NaiveCascade,
    DatasetTier(String),
}

impl Provenance {
    pub fn label(&self) -> String {
        match self {
            Provenance::TeacherHighres => "teacher-highres".into(),
            Provenance::TeacherUpsampled => "teacher-upsampled".into(),
            Provenance::StudentCascade => "student-cascade".into(),
            Provenance::NoRmCascade => "no-rm-cascade".into(),
            Provenance::NaiveCascade => "naive-cascade".into(),
            Provenance::DatasetTier(t) => format!("dataset-{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub images: Vec<ImageGrid>,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn new(images: Vec<ImageGrid>, provenance: Provenance) -> Result<Self> {
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|x| !x.same_shape(first)) {
                return Err(Error::Shape {
                    expected: format!("{:?}", first.shape()),
                    got: format!("{:?}", bad.shape()),
                });
            }
        }
        Ok(Self { images, provenance })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn split_at(&self, n: usize) -> (SampleSet, SampleSet) {
        let (a, b) = self.images.split_at(n.min(self.len()));
        (
            SampleSet { images: a.to_vec(), provenance: self.provenance.clone() },
            SampleSet { images: b.to_vec(), provenance: self.provenance.clone() },
        )
    }
}

fn sq_dist(a: &ImageGrid, b: &ImageGrid) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pooled kernel matrix for unbiased MMD² with an RBF kernel, reusable for
/// permutation tests.
#[derive(Debug, Clone)]
pub struct MmdTest {
    n_a: usize,
    n: usize,
    kernel: Vec<f64>,
    pub bandwidth: f64,
}

impl MmdTest {
    /// `bandwidth = None` uses the median pairwise distance of the pooled set.
    pub fn new(a: &SampleSet, b: &SampleSet, bandwidth: Option<f64>) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::Invalid(format!(
                "MMD needs at least 2 samples per set, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        if !a.images[0].same_shape(&b.images[0]) {
            return Err(Error::Shape {
                expected: format!("{:?}", a.images[0].shape()),
                got: format!("{:?}", b.images[0].shape()),
            });
        }
        let pooled: Vec<&ImageGrid> = a.images.iter().chain(&b.images).collect();
        let n = pooled.len();
        let mut d2 = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = sq_dist(pooled[i], pooled[j]);
                d2[i * n + j] = d;
                d2[j * n + i] = d;
            }
        }
        let h = match bandwidth {
            Some(h) if h > 0.0 && h.is_finite() => h,
            Some(h) => return Err(Error::Domain { value: h, domain: "bandwidth > 0" }),
            None => {
                let mut off: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| d2[i * n + j]).collect();
                off.sort_by(f64::total_cmp);
                let med = off[off.len() / 2].sqrt();
                if med > 0.0 { med } else { 1.0 }
            }
        };
        let kernel = d2.iter().map(|d| (-d / (2.0 * h * h)).exp()).collect();
        Ok(Self { n_a: a.len(), n, kernel, bandwidth: h })
    }

    fn mmd_for(&self, idx: &[usize]) -> f64 {
        let (ia, ib) = idx.split_at(self.n_a);
        let k = |i: usize, j: usize| self.kernel[i * self.n + j];
        let within = |s: &[usize]| {
            let mut t = 0.0;
            for (p, &i) in s.iter().enumerate() {
                for &j in &s[p + 1..] {
                    t += k(i, j);
                }
            }
            2.0 * t / (s.len() * (s.len() - 1)) as f64
        };
        let mut cross = 0.0;
        for &i in ia {
            for &j in ib {
                cross += k(i, j);
            }
        }
        within(ia) + within(ib) - 2.0 * cross / (ia.len() * ib.len()) as f64
    }

    /// Unbiased MMD² between the two input sets.
    pub fn statistic(&self) -> f64 {
        let idx: Vec<usize> = (0..self.n).collect();
        self.mmd_for(&idx)
    }

    /// MMD² under random relabelings of the pooled samples.
    pub fn permutation_null(&self, permutations: usize, rng: &mut SeededRng) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        (0..permutations)
            .map(|_| {
                for i in (1..idx.len()).rev() {
                    idx.swap(i, rng.below(i + 1));
                }
                self.mmd_for(&idx)
            })
            .collect()
    }
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q * (v.len() - 1) as f64).round() as usize;
    v[pos.min(v.len() - 1)]
}

pub fn mmd_rbf(a: &SampleSet, b: &SampleSet, bandwidth: Option<f64>) -> Result<f64> {
    Ok(MmdTest::new(a, b, bandwidth)?.statistic())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub mean: f64,
    pub variance: f64,
    /// Mean absolute horizontal and vertical finite difference.
    pub edge_energy: f64,
    /// Share of non-DC spectral power in 4 radial frequency bins, low to high.
    pub spectrum: [f64; 4],
}

fn radial_spectrum(x: &ImageGrid) -> [f64; 4] {
    let (c, h, w) = x.shape();
    let mut bins = [0.0; 4];
    let r_max = ((h / 2).pow(2) as f64 + (w / 2).pow(2) as f64).sqrt();
    for ch in 0..c {
        let mut m = 0.0;
        for y in 0..h {
            for xx in 0..w {
                m += x.at(ch, y, xx);
            }
        }
        m /= (h * w) as f64;
        let first = x.at(ch, 0, 0);
        if (0..h).all(|y| (0..w).all(|xx| x.at(ch, y, xx) == first)) {
            continue;
        }
        for u in 0..h {
            for v in 0..w {
                if u == 0 && v == 0 {
                    continue;
                }
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let ph = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                        let p = x.at(ch, y, xx) - m;
                        re += p * ph.cos();
                        im += p * ph.sin();
                    }
                }
                let fu = u.min(h - u) as f64;
                let fv = v.min(w - v) as f64;
                let r = (fu * fu + fv * fv).sqrt() / r_max;
                bins[((r * 4.0) as usize).min(3)] += re * re + im * im;
            }
        }
    }
    bins
}

pub fn summary_stats(s: &SampleSet) -> Result<SummaryStats> {
    if s.is_empty() {
        return Err(Error::Invalid("summary statistics of an empty set".into()));
    }
    let all: Vec<f64> = s.images.iter().flat_map(|x| x.data().iter().copied()).collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let variance = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let (mut edge, mut count) = (0.0, 0usize);
    let mut power = [0.0; 4];
    for x in &s.images {
        let (c, h, w) = x.shape();
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    if xx + 1 < w {
                        edge += (x.at(ch, y, xx + 1) - x.at(ch, y, xx)).abs();
                        count += 1;
                    }
                    if y + 1 < h {
                        edge += (x.at(ch, y + 1, xx) - x.at(ch, y, xx)).abs();
                        count += 1;
                    }
                }
            }
        }
        for (p, b) in power.iter_mut().zip(radial_spectrum(x)) {
            *p += b;
        }
    }
    let total: f64 = power.iter().sum();
    let spectrum = if total > 0.0 { power.map(|p| p / total) } else { [0.0; 4] };
    Ok(SummaryStats {
        mean,
        variance,
        edge_energy: if count > 0 { edge / count as f64 } else { 0.0 },
        spectrum,
    })
}

/// `steps` model evaluations at `pixels` pixels each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEntry {
    pub steps: f64,
    pub pixels: f64,
}

impl CostEntry {
    pub fn new(steps: usize, width: usize, height: usize) -> Self {
        Self { steps: steps as f64, pixels: (width * height) as f64 }
    }
}

/// Base cost times its guidance multiplier over the summed method cost,
/// with per-step cost `pixels^γ`.
pub fn cost_model_speedup(base: CostEntry, cfg_multiplier: f64, method: &[CostEntry], gamma: f64) -> Result<f64> {
    let entries = std::iter::once(&base).chain(method);
    if method.is_empty() || cfg_multiplier <= 0.0 || entries.into_iter().any(|e| !(e.steps > 0.0 && e.pixels > 0.0)) {
        return Err(Error::Invalid("cost model entries must be positive".into()));
    }
    let cost = |e: &CostEntry| e.steps * e.pixels.powf(gamma);
    Ok(cost(&base) * cfg_multiplier / method.iter().map(cost).sum::<f64>())
}

/// Published configurations: base sampler, cascaded few-step sampler and the
/// reported speedup.
#[derive(Debug, Clone, PartialEq)]
pub struct CostScenario {
    pub name: &'static str,
    pub base: CostEntry,
    pub cfg_multiplier: f64,
    pub method: Vec<CostEntry>,
    pub reported: f64,
}

pub fn cost_scenarios() -> Vec<CostScenario> {
    vec![
        CostScenario {
            name: "sdxl",
            base: CostEntry::new(40, 1024, 1024),
            cfg_multiplier: 2.0,
            method: vec![CostEntry::new(2, 512, 512), CostEntry::new(2, 1024, 1024)],
            reported: 33.4,
        },
        CostScenario {
            name: "sd35",
            base: CostEntry::new(40, 1024, 1024),
            cfg_multiplier: 2.0,
            method: vec![CostEntry::new(2, 512, 512), CostEntry::new(2, 1024, 1024)],
            reported: 32.0,
        },
        CostScenario {
            name: "wan",
            base: CostEntry::new(50, 1280, 720),
            cfg_multiplier: 2.0,
            method: vec![CostEntry::new(3, 832, 480), CostEntry::new(3, 1280, 720)],
            reported: 25.6,
        },
    ]
}

/// Speedup table at γ = 1 and γ = 2.
pub fn cost_table_csv() -> Result<String> {
    let mut s = String::from("config,speedup_gamma1,speedup_gamma2,reported\n");
    for c in cost_scenarios() {
        let g1 = cost_model_speedup(c.base, c.cfg_multiplier, &c.method, 1.0)?;
        let g2 = cost_model_speedup(c.base, c.cfg_multiplier, &c.method, 2.0)?;
        s.push_str(&format!("{},{g1:.2},{g2:.2},{:.1}\n", c.name, c.reported));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn push(&mut self, method: &str, metric: &str, value: f64) {
        self.rows.push(ReportRow { method: method.into(), metric: metric.into(), value });
    }

    pub fn get(&self, method: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method && r.metric == metric).map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,metric,value\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.9e}\n", r.method, r.metric, r.value));
        }
        s
    }
}

/// Compares each method set with the teacher reference and the curated
/// dataset tier. The reference is split in half to calibrate the null.
pub fn evaluate_sets(
    reference: &SampleSet,
    dataset_high: &SampleSet,
    methods: &[SampleSet],
    permutations: usize,
    rng: &SeededRng,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let (ra, rb) = reference.split_at(reference.len() / 2);
    report.push("teacher-halves", "mmd_to_teacher", mmd_rbf(&ra, &rb, None)?);
    for set in methods {
        let label = set.provenance.label();
        let test = MmdTest::new(set, reference, None)?;
        let null = test.permutation_null(permutations, &mut rng.derive(&format!("perm-{label}")));
        report.push(&label, "mmd_to_teacher", test.statistic());
        report.push(&label, "mmd_null_q95", quantile(&null, 0.95));
        report.push(&label, "mmd_to_dataset", mmd_rbf(set, dataset_high, None)?);
    }
    for set in std::iter::once(reference).chain(methods) {
        let label = set.provenance.label();
        let st = summary_stats(set)?;
        report.push(&label, "mean", st.mean);
        report.push(&label, "variance", st.variance);
        report.push(&label, "edge_energy", st.edge_energy);
        for (i, p) in st.spectrum.iter().enumerate() {
            report.push(&label, &format!("spectrum_bin{i}"), *p);
        }
    }
    Ok(report)
}

/// Contact sheet with at most `cols` columns and no gutter.
pub fn contact_sheet_tiles(images: &[ImageGrid], cols: usize) -> Result<ImageGrid> {
    contact_sheet(images, cols.min(images.len()).max(1), 0.0)
}

/// Writes `report.csv` and one contact sheet per set into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport, sets: &[&SampleSet], tiles: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("report.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    for s in sets {
        let n = tiles.min(s.len());
        if n == 0 {
            continue;
        }
        let sheet = contact_sheet_tiles(&s.images[..n], 8)?;
        write_pnm(&dir.join(format!("{}.pgm", s.provenance.label())), &sheet, 0.0, 1.0)?;
    }
    Ok(())
}
