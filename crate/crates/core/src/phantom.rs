//! Synthetic phantoms, forward simulation and acquisition corruption.

use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matcher::background_value;
use crate::signal::{simulate_fingerprint, ParameterGrid, SequenceTrain, TissueParams};
use crate::types::{MapKind, MrfImage, ParametricMaps};

/// Golden angle used to rotate the line pattern between frames, in degrees.
pub const GOLDEN_ANGLE_DEG: f64 = 111.246_117_974_981;

#[derive(Debug, Clone)]
pub struct Phantom {
    pub maps: ParametricMaps,
    /// 0 for background, 1 for the body, 2.. for inclusions.
    pub region_labels: Array2<u32>,
    pub foreground_mask: Array2<bool>,
    /// Parameters of region `i + 1`.
    pub region_params: Vec<TissueParams>,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn sample_params(grid: &ParameterGrid, snap: bool, rng: &mut ChaCha8Rng) -> TissueParams {
    let mut v = [0.0; 5];
    for kind in MapKind::ALL {
        let axis = grid.axis(kind);
        v[kind.index()] = if snap {
            axis[rng.gen_range(0..axis.len())]
        } else {
            let (lo, hi) = (grid.min(kind), grid.max(kind));
            if hi > lo { rng.gen_range(lo..=hi) } else { lo }
        };
    }
    let mut p = TissueParams::from_array(v);
    if snap {
        // the other pool's T1 is unobservable at pure water or pure fat;
        // pin it to the first grid value, which is what matching returns
        if p.ff == 0.0 {
            p.t1_fat = grid.axis(MapKind::T1Fat)[0];
        }
        if p.ff == 1.0 {
            p.t1_h2o = grid.axis(MapKind::T1H2o)[0];
        }
    }
    p
}

/// Body ellipse plus `n_regions - 1` random elliptical inclusions, each
/// region holding one parameter tuple.
pub fn generate_phantom(
    h: usize,
    w: usize,
    n_regions: usize,
    seed: u64,
    grid: &ParameterGrid,
    snap_to_grid: bool,
) -> Result<Phantom> {
    if h < 4 || w < 4 {
        return Err(invalid(format!("phantom dims {h}x{w} too small")));
    }
    if n_regions == 0 {
        return Err(invalid("n_regions must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);
    let body = Ellipse {
        cy: (hf - 1.0) / 2.0 + rng.gen_range(-0.03..0.03) * hf,
        cx: (wf - 1.0) / 2.0 + rng.gen_range(-0.03..0.03) * wf,
        ry: rng.gen_range(0.38..0.46) * hf,
        rx: rng.gen_range(0.38..0.46) * wf,
        angle: rng.gen_range(-0.3..0.3),
    };
    let mut labels = Array2::<u32>::zeros((h, w));
    for ((y, x), l) in labels.indexed_iter_mut() {
        if body.contains(y as f64, x as f64) {
            *l = 1;
        }
    }
    for region in 2..=n_regions as u32 {
        let r = rng.gen_range(0.0..0.6f64).sqrt();
        let t = rng.gen_range(0.0..2.0 * PI);
        let inc = Ellipse {
            cy: body.cy + r * body.ry * t.sin(),
            cx: body.cx + r * body.rx * t.cos(),
            ry: rng.gen_range(0.06..0.18) * hf,
            rx: rng.gen_range(0.06..0.18) * wf,
            angle: rng.gen_range(0.0..PI),
        };
        for ((y, x), l) in labels.indexed_iter_mut() {
            if *l != 0 && inc.contains(y as f64, x as f64) {
                *l = region;
            }
        }
    }
    let region_params: Vec<TissueParams> =
        (0..n_regions).map(|_| sample_params(grid, snap_to_grid, &mut rng)).collect();

    let mut maps = ParametricMaps::zeros(h, w);
    for kind in MapKind::ALL {
        let bg = background_value(grid, kind);
        let mut m = maps.map_mut(kind);
        for ((y, x), v) in m.indexed_iter_mut() {
            let l = labels[(y, x)];
            *v = if l == 0 { bg } else { region_params[l as usize - 1].get(kind) };
        }
    }
    let foreground_mask = labels.mapv(|l| l != 0);
    Ok(Phantom { maps, region_labels: labels, foreground_mask, region_params })
}

/// Voxel-wise fingerprint simulation; background voxels stay zero.
pub fn forward_simulate(phantom: &Phantom, seq: &SequenceTrain) -> Result<MrfImage> {
    let fps = phantom
        .region_params
        .iter()
        .map(|p| simulate_fingerprint(seq, p))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = phantom.region_labels.dim();
    let mut img = MrfImage::zeros(h, w, seq.frames());
    for ((y, x), &l) in phantom.region_labels.indexed_iter() {
        if l != 0 {
            let fp = &fps[l as usize - 1];
            img.data.slice_mut(ndarray::s![y, x, ..]).iter_mut().zip(fp).for_each(|(d, s)| *d = *s);
        }
    }
    Ok(img)
}

/// K-space sampling mask of one frame, in unshifted FFT order: `spokes`
/// lines through the k-space centre rotated by the golden angle from line
/// to line and frame to frame. `None` when the lines would cover at least
/// the full matrix.
pub fn kspace_mask(h: usize, w: usize, frame: usize, spokes: usize) -> Option<Array2<bool>> {
    let n = h.max(w);
    if spokes == 0 || spokes * n >= h * w {
        return None;
    }
    let mut mask = Array2::from_elem((h, w), false);
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    for s in 0..spokes {
        let theta = ((frame * spokes + s) as f64 * GOLDEN_ANGLE_DEG).to_radians();
        let (sn, cs) = theta.sin_cos();
        for i in 0..n {
            let r = i as f64 - (n / 2) as f64;
            let ky = (cy + r * sn).round();
            let kx = (cx + r * cs).round();
            if ky < 0.0 || kx < 0.0 || ky >= h as f64 || kx >= w as f64 {
                continue;
            }
            // centred index -> FFT index
            let (ky, kx) = (ky as usize, kx as usize);
            mask[((ky + h - h / 2) % h, (kx + w - w / 2) % w)] = true;
        }
    }
    Some(mask)
}

fn fft2(plane: &mut Array2<Complex64>, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (h, w) = plane.dim();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for mut r in plane.axis_iter_mut(Axis(0)) {
        let mut buf = r.to_vec();
        row.process(&mut buf);
        r.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
    }
    for mut c in plane.axis_iter_mut(Axis(1)) {
        let mut buf = c.to_vec();
        col.process(&mut buf);
        c.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        plane.mapv_inplace(|v| v * scale);
    }
}

/// Apply per-frame k-space masking (optional) and complex white Gaussian
/// noise at `snr_db` relative to the mean foreground power. An infinite
/// `snr_db` adds no noise.
pub fn corrupt(img: &MrfImage, snr_db: f64, spokes_per_frame: Option<usize>, seed: u64) -> Result<MrfImage> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(invalid(format!("snr_db {snr_db} is not usable")));
    }
    let (h, w, t) = img.data.dim();
    let foreground = img.nonzero_mask();
    let mut out = img.clone();
    if let Some(spokes) = spokes_per_frame {
        let mut planner = FftPlanner::new();
        for f in 0..t {
            let Some(mask) = kspace_mask(h, w, f, spokes) else { continue };
            let mut plane = img.data.index_axis(Axis(2), f).to_owned();
            fft2(&mut plane, &mut planner, false);
            ndarray::Zip::from(&mut plane).and(&mask).for_each(|v, &m| {
                if !m {
                    *v = Complex64::new(0.0, 0.0);
                }
            });
            fft2(&mut plane, &mut planner, true);
            out.data.index_axis_mut(Axis(2), f).assign(&plane);
        }
    }
    if snr_db.is_finite() {
        let p_signal = foreground_power(&out, &foreground);
        if p_signal > 0.0 {
            let sigma = (p_signal / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in out.data.iter_mut() {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                *v += Complex64::new(re, im) * sigma;
            }
        }
    }
    Ok(out)
}

/// Mean `|x|^2` over masked voxels and all frames.
pub fn foreground_power(img: &MrfImage, mask: &Array2<bool>) -> f64 {
    let (h, w, _) = img.data.dim();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] {
                for v in img.data.slice(ndarray::s![y, x, ..]) {
                    sum += v.norm_sqr();
                    n += 1;
                }
            }
        }
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

fn default_n_regions() -> usize {
    6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    #[serde(default = "default_n_regions")]
    pub n_regions: usize,
    #[serde(default)]
    pub snap_to_grid: bool,
    /// `None` means noise-free.
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub spokes_per_frame: Option<usize>,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    #[serde(default)]
    pub sequence: Option<SequenceTrain>,
    #[serde(default)]
    pub grid: Option<ParameterGrid>,
}

impl DatasetConfig {
    /// 120/8/12 phantoms at 64×64, 32 frames, 20 dB, 8 lines per frame.
    pub fn desk_default() -> Self {
        DatasetConfig {
            height: 64,
            width: 64,
            frames: 32,
            n_regions: default_n_regions(),
            snap_to_grid: true,
            snr_db: Some(20.0),
            spokes_per_frame: Some(8),
            n_train: 120,
            n_validation: 8,
            n_test: 12,
            sequence: None,
            grid: None,
        }
    }

    pub fn sequence(&self) -> Result<SequenceTrain> {
        let seq = self.sequence.clone().unwrap_or_else(|| SequenceTrain::default_train(self.frames));
        seq.validate()?;
        if seq.frames() != self.frames {
            return Err(invalid(format!("sequence has {} frames, config says {}", seq.frames(), self.frames)));
        }
        Ok(seq)
    }

    pub fn grid(&self) -> Result<ParameterGrid> {
        Ok(self.grid.clone().unwrap_or_else(ParameterGrid::desk_default))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_regions == 0 {
            return Err(invalid("n_regions must be >= 1"));
        }
        if self.snr_db.is_some_and(|s| s.is_nan()) {
            return Err(invalid("snr_db must be a number"));
        }
        self.sequence()?;
        self.grid()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub noise_seed: u64,
    #[serde(default)]
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub seed: u64,
    /// Full matrix size over mean retained k-space samples per frame.
    pub acceleration_factor: f64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub entry: ManifestEntry,
    pub phantom: Phantom,
    pub image: MrfImage,
}

/// Mean k-space fraction retained per frame.
pub fn retained_fraction(h: usize, w: usize, frames: usize, spokes: Option<usize>) -> f64 {
    let Some(s) = spokes else { return 1.0 };
    let total: f64 = (0..frames.max(1))
        .map(|f| match kspace_mask(h, w, f, s) {
            Some(m) => m.iter().filter(|&&v| v).count() as f64 / (h * w) as f64,
            None => 1.0,
        })
        .sum();
    total / frames.max(1) as f64
}

/// Seeds of each phantom, derived from the dataset seed.
pub fn plan_dataset(config: &DatasetConfig, seed: u64) -> Result<DatasetManifest> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splits = [
        (Split::Train, config.n_train),
        (Split::Validation, config.n_validation),
        (Split::Test, config.n_test),
    ];
    let mut entries = Vec::new();
    for (split, n) in splits {
        for i in 0..n {
            entries.push(ManifestEntry {
                id: format!("{}_{i:03}", split.name()),
                split,
                seed: rng.gen(),
                noise_seed: rng.gen(),
                files: Vec::new(),
            });
        }
    }
    let frac = retained_fraction(config.height, config.width, config.frames, config.spokes_per_frame);
    Ok(DatasetManifest { config: config.clone(), seed, acceleration_factor: 1.0 / frac, entries })
}

pub fn generate_sample(config: &DatasetConfig, entry: &ManifestEntry) -> Result<Sample> {
    let grid = config.grid()?;
    let seq = config.sequence()?;
    let phantom = generate_phantom(config.height, config.width, config.n_regions, entry.seed, &grid, config.snap_to_grid)?;
    let clean = forward_simulate(&phantom, &seq)?;
    let image = match (config.snr_db, config.spokes_per_frame) {
        (None, None) => clean,
        (snr, spokes) => corrupt(&clean, snr.unwrap_or(f64::INFINITY), spokes, entry.noise_seed)?,
    };
    Ok(Sample { entry: entry.clone(), phantom, image })
}

/// Generate every phantom of a dataset in parallel, in manifest order.
pub fn generate_dataset(config: &DatasetConfig, seed: u64) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest = plan_dataset(config, seed)?;
    let samples = manifest
        .entries
        .par_iter()
        .map(|e| generate_sample(config, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
