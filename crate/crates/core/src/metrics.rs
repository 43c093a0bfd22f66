//! Image-fidelity metrics, ROI statistics, blurriness and evaluation reports.

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::nn::Network;
use crate::pipeline::reconstruct_image;
use crate::signal::ParameterGrid;
use crate::types::{MapKind, MrfImage, ParametricMaps, N_MAPS};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Voxels with reference FF above this are dropped from T1_H2O metrics.
pub const FF_EXCLUSION: f64 = 0.7;

fn masked_pairs(
    reference: ArrayView2<'_, f64>,
    pred: ArrayView2<'_, f64>,
    mask: Option<ArrayView2<'_, bool>>,
) -> Result<Vec<(f64, f64)>> {
    if reference.dim() != pred.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", reference.dim()),
            got: format!("{:?}", pred.dim()),
        });
    }
    if let Some(m) = mask {
        if m.dim() != reference.dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("{:?} mask", reference.dim()),
                got: format!("{:?}", m.dim()),
            });
        }
    }
    let pairs: Vec<(f64, f64)> = reference
        .indexed_iter()
        .filter(|(idx, _)| mask.is_none_or(|m| m[*idx]))
        .map(|(idx, &r)| (r, pred[idx]))
        .collect();
    if pairs.is_empty() {
        return Err(invalid("empty evaluation mask"));
    }
    Ok(pairs)
}

/// ‖pred − ref‖₂ / ‖ref‖₂ over masked voxels.
pub fn nrmse(reference: ArrayView2<f64>, pred: ArrayView2<f64>, mask: Option<ArrayView2<bool>>) -> Result<f64> {
    let pairs = masked_pairs(reference, pred, mask)?;
    let num: f64 = pairs.iter().map(|(r, p)| (p - r).powi(2)).sum();
    let den: f64 = pairs.iter().map(|(r, _)| r * r).sum();
    if den == 0.0 {
        return Err(invalid("reference has zero norm"));
    }
    Ok((num / den).sqrt())
}

/// 10·log10(max(ref)² / MSE) over masked voxels; `+inf` when identical.
pub fn psnr(reference: ArrayView2<f64>, pred: ArrayView2<f64>, mask: Option<ArrayView2<bool>>) -> Result<f64> {
    let pairs = masked_pairs(reference, pred, mask)?;
    let mse = pairs.iter().map(|(r, p)| (p - r).powi(2)).sum::<f64>() / pairs.len() as f64;
    let peak = pairs.iter().map(|(r, _)| *r).fold(f64::NEG_INFINITY, f64::max);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Dynamic range used by SSIM: the reference maximum, falling back to the
/// largest magnitude (maps such as Δf can be non-positive) and then to 1.
pub fn ssim_range(reference: ArrayView2<f64>) -> f64 {
    let max = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > 0.0 {
        return max;
    }
    let mag = reference.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if mag > 0.0 { mag } else { 1.0 }
}

/// Mean SSIM over all 7×7 uniform windows at stride 1, with sample
/// (co)variances inside each window.
pub fn ssim(reference: ArrayView2<f64>, pred: ArrayView2<f64>) -> Result<f64> {
    let (h, w) = reference.dim();
    if pred.dim() != (h, w) {
        return Err(Error::DimensionMismatch { expected: format!("{:?}", (h, w)), got: format!("{:?}", pred.dim()) });
    }
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(invalid(format!("SSIM needs maps of at least {k}x{k}, got {h}x{w}")));
    }
    let l = ssim_range(reference);
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let np = (k * k) as f64;
    let cov_norm = np / (np - 1.0);
    let mut total = 0.0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..k {
                for dx in 0..k {
                    let a = reference[(y + dy, x + dx)];
                    let b = pred[(y + dy, x + dx)];
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (ux, uy) = (sx / np, sy / np);
            let vx = cov_norm * (sxx / np - ux * ux);
            let vy = cov_norm * (syy / np - uy * uy);
            let vxy = cov_norm * (sxy / np - ux * uy);
            total += ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    #[serde(with = "json_float")]
    pub mean: f64,
    #[serde(with = "json_float")]
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        if values.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        if values.iter().any(|v| v.is_infinite()) || values.len() < 2 {
            return Stat { mean, std: if values.len() < 2 { 0.0 } else { f64::NAN } };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Stat { mean, std: var.sqrt() }
    }
}

/// JSON numbers cannot hold infinities; they are written as strings.
pub mod json_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Num {
            F(f64),
            S(String),
        }
        match Num::deserialize(d)? {
            Num::F(v) => Ok(v),
            Num::S(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("bad float {s:?}"))),
            },
        }
    }
}

/// Per-ROI mean values of one map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiPair {
    pub slice: usize,
    pub roi_id: u32,
    pub map: MapKind,
    pub ref_mean: f64,
    pub pred_mean: f64,
}

/// Labeled regions of one slice; label 0 is unlabeled.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSet {
    pub slice: usize,
    pub labels: Array2<u32>,
}

impl RoiSet {
    pub fn ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// ROI means of `kind` for every ROI with at least one voxel in `mask`.
pub fn roi_means(
    reference: &ParametricMaps,
    pred: &ParametricMaps,
    rois: &RoiSet,
    kind: MapKind,
    mask: Option<ArrayView2<bool>>,
) -> Vec<RoiPair> {
    let (r, p) = (reference.map(kind), pred.map(kind));
    rois.ids()
        .into_iter()
        .filter_map(|id| {
            let mut n = 0usize;
            let (mut sr, mut sp) = (0.0, 0.0);
            for ((y, x), &l) in rois.labels.indexed_iter() {
                if l == id && mask.is_none_or(|m| m[(y, x)]) {
                    n += 1;
                    sr += r[(y, x)];
                    sp += p[(y, x)];
                }
            }
            (n > 0).then(|| RoiPair {
                slice: rois.slice,
                roi_id: id,
                map: kind,
                ref_mean: sr / n as f64,
                pred_mean: sp / n as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n: usize,
}

/// Ordinary least squares of predicted on reference ROI means.
pub fn roi_regression(pairs: &[RoiPair]) -> Result<Regression> {
    if pairs.len() < 3 {
        return Err(invalid(format!("regression needs >= 3 ROIs, got {}", pairs.len())));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.ref_mean).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.pred_mean).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.ref_mean - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.ref_mean - mx) * (p.pred_mean - my)).sum();
    let syy: f64 = pairs.iter().map(|p| (p.pred_mean - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("all reference ROI means are equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = pairs.iter().map(|p| (p.pred_mean - (intercept + slope * p.ref_mean)).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(Regression { slope, intercept, r2, n: pairs.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Mean difference (pred − ref) and ±1.96 sample-SD limits of agreement.
pub fn bland_altman(pairs: &[RoiPair]) -> Result<BlandAltman> {
    if pairs.len() < 2 {
        return Err(invalid("Bland-Altman needs at least 2 pairs"));
    }
    let d: Vec<f64> = pairs.iter().map(|p| p.pred_mean - p.ref_mean).collect();
    let s = Stat::of(&d);
    Ok(BlandAltman { bias: s.mean, lower: s.mean - 1.96 * s.std, upper: s.mean + 1.96 * s.std })
}

/// Evaluation mask of `kind`: foreground, and for T1_H2O also reference FF
/// at most [`FF_EXCLUSION`].
pub fn apply_exclusions(reference: &ParametricMaps, foreground: &Array2<bool>, kind: MapKind) -> Array2<bool> {
    let mut mask = foreground.clone();
    if kind == MapKind::T1H2o {
        let ff = reference.map(MapKind::Ff);
        ndarray::Zip::from(&mut mask).and(&ff).for_each(|m, &f| *m = *m && f <= FF_EXCLUSION);
    }
    mask
}

/// Exclusion rules that apply to `kind`.
pub fn exclusion_rules(kind: MapKind) -> Vec<String> {
    let mut rules = vec!["background".to_string()];
    if kind == MapKind::T1H2o {
        rules.push(format!("ff > {FF_EXCLUSION}"));
    }
    rules
}

pub fn default_thresholds() -> Vec<f64> {
    (0..9).map(|i| (55 + 5 * i) as f64 / 100.0).collect()
}

/// Fraction of spectral energy of the mean-subtracted map at radial
/// frequency above each threshold (fraction of the Nyquist radius).
pub fn blurriness(map: ArrayView2<f64>, thresholds: &[f64]) -> Vec<f64> {
    let (h, w) = map.dim();
    if h == 0 || w == 0 {
        return vec![0.0; thresholds.len()];
    }
    let mean = map.sum() / (h * w) as f64;
    let mut spec: Array2<Complex64> = map.mapv(|v| Complex64::new(v - mean, 0.0));
    let mut planner = FftPlanner::<f64>::new();
    let row = planner.plan_fft_forward(w);
    let col = planner.plan_fft_forward(h);
    for mut r in spec.rows_mut() {
        let mut buf = r.to_vec();
        row.process(&mut buf);
        r.assign(&ndarray::ArrayView1::from(&buf));
    }
    for mut c in spec.columns_mut() {
        let mut buf = c.to_vec();
        col.process(&mut buf);
        c.assign(&ndarray::ArrayView1::from(&buf));
    }
    let folded = |k: usize, n: usize| {
        let k = if k > n / 2 { k as f64 - n as f64 } else { k as f64 };
        k / n as f64 / 0.5
    };
    let mut radial = Vec::with_capacity(h * w);
    let mut total = 0.0;
    for ((y, x), v) in spec.indexed_iter() {
        let e = v.norm_sqr();
        total += e;
        radial.push((folded(y, h).hypot(folded(x, w)), e));
    }
    thresholds
        .iter()
        .map(|&t| {
            if total == 0.0 {
                return 0.0;
            }
            radial.iter().filter(|(r, _)| *r > t).map(|(_, e)| e).sum::<f64>() / total
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: MapKind,
    pub nrmse: Stat,
    pub psnr: Stat,
    pub ssim: Stat,
    pub regression: Option<Regression>,
    pub bland_altman: Option<BlandAltman>,
    pub exclusions: Vec<String>,
    pub n_rois: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurCurve {
    pub map: MapKind,
    pub source: String,
    pub thresholds: Vec<f64>,
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_slices: usize,
    pub maps: Vec<MapReport>,
    pub blurriness: Vec<BlurCurve>,
    pub roi_pairs: Vec<RoiPair>,
    /// Description of the voxel masks.
    pub masks: String,
}

impl EvalReport {
    pub fn map(&self, kind: MapKind) -> &MapReport {
        self.maps.iter().find(|m| m.map == kind).expect("every map reported")
    }
}

/// Compare predicted maps against references, slice by slice. ROIs are the
/// labeled regions (0 = background), which also define the foreground.
pub fn evaluate(references: &[ParametricMaps], preds: &[ParametricMaps], labels: &[Array2<u32>]) -> Result<EvalReport> {
    if references.len() != preds.len() || references.len() != labels.len() || references.is_empty() {
        return Err(invalid("evaluate needs equally many (>= 1) reference, predicted and label maps"));
    }
    let thresholds = default_thresholds();
    let mut maps = Vec::new();
    let mut blur = Vec::new();
    let mut all_pairs = Vec::new();
    for kind in MapKind::ALL {
        let (mut e, mut p, mut s) = (Vec::new(), Vec::new(), Vec::new());
        let mut pairs = Vec::new();
        let mut ref_blur = vec![0.0; thresholds.len()];
        let mut pred_blur = vec![0.0; thresholds.len()];
        for (i, ((r, q), l)) in references.iter().zip(preds).zip(labels).enumerate() {
            let fg = l.mapv(|v| v != 0);
            let mask = apply_exclusions(r, &fg, kind);
            let (rm, pm) = (r.map(kind), q.map(kind));
            if mask.iter().any(|&m| m) {
                p.push(psnr(rm, pm, Some(mask.view()))?);
                // a zero reference (e.g. all-water FF) has no defined NRMSE
                if let Ok(v) = nrmse(rm, pm, Some(mask.view())) {
                    e.push(v);
                }
            }
            let zero_out = |m: ArrayView2<f64>| {
                let mut a = m.to_owned();
                ndarray::Zip::from(&mut a).and(&mask).for_each(|v, &k| {
                    if !k {
                        *v = 0.0;
                    }
                });
                a
            };
            let (rz, pz) = (zero_out(rm), zero_out(pm));
            s.push(ssim(rz.view(), pz.view())?);
            for (acc, v) in ref_blur.iter_mut().zip(blurriness(rz.view(), &thresholds)) {
                *acc += v / references.len() as f64;
            }
            for (acc, v) in pred_blur.iter_mut().zip(blurriness(pz.view(), &thresholds)) {
                *acc += v / references.len() as f64;
            }
            let rois = RoiSet { slice: i, labels: l.clone() };
            let mut slice_pairs = roi_means(r, q, &rois, kind, Some(fg.view()));
            if kind == MapKind::T1H2o {
                let ff_pairs = roi_means(r, q, &rois, MapKind::Ff, Some(fg.view()));
                slice_pairs.retain(|pr| {
                    ff_pairs.iter().any(|f| f.roi_id == pr.roi_id && f.ref_mean <= FF_EXCLUSION)
                });
            }
            pairs.extend(slice_pairs);
        }
        maps.push(MapReport {
            map: kind,
            nrmse: Stat::of(&e),
            psnr: Stat::of(&p),
            ssim: Stat::of(&s),
            regression: roi_regression(&pairs).ok(),
            bland_altman: bland_altman(&pairs).ok(),
            exclusions: exclusion_rules(kind),
            n_rois: pairs.len(),
        });
        blur.push(BlurCurve { map: kind, source: "reference".into(), thresholds: thresholds.clone(), ratios: ref_blur });
        blur.push(BlurCurve { map: kind, source: "prediction".into(), thresholds: thresholds.clone(), ratios: pred_blur });
        all_pairs.extend(pairs);
    }
    Ok(EvalReport {
        n_slices: references.len(),
        maps,
        blurriness: blur,
        roi_pairs: all_pairs,
        masks: format!("foreground = label != 0; T1_H2O additionally requires reference FF <= {FF_EXCLUSION}; SSIM and blurriness use maps zeroed outside the mask"),
    })
}

/// ROI table as CSV with columns `roi_id,map,ref_mean,pred_mean` (plus slice).
pub fn roi_csv(pairs: &[RoiPair]) -> String {
    let mut out = String::from("roi_id,map,ref_mean,pred_mean,slice\n");
    for p in pairs {
        out.push_str(&format!("{},{},{},{},{}\n", p.roi_id, p.map.name(), p.ref_mean, p.pred_mean, p.slice));
    }
    out
}

/// One slice and the model whose frame importances are measured.
pub struct ImportanceInput<'a> {
    pub net: &'a Network<f32>,
    pub image: &'a MrfImage,
    pub reference: &'a ParametricMaps,
    pub foreground: &'a Array2<bool>,
    pub grid: &'a ParameterGrid,
    pub patch_size: usize,
}

/// Importance of one frame: |ΔNRMSE| per map, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameImportance {
    pub frame: usize,
    pub importance: [f64; N_MAPS],
}

/// Random permutation of `n` foreground voxels for a given frame and seed.
pub fn frame_permutation(n: usize, frame: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Move frame `frame`'s complex values among the foreground voxels (raster
/// order) so that voxel `i` receives the value of voxel `perm[i]`.
pub fn permute_frame(img: &MrfImage, foreground: &Array2<bool>, frame: usize, perm: &[usize]) -> Result<MrfImage> {
    if frame >= img.frames() {
        return Err(invalid(format!("frame {frame} out of range for {} frames", img.frames())));
    }
    if foreground.dim() != (img.height(), img.width()) {
        return Err(invalid("foreground mask does not match the image"));
    }
    let coords: Vec<(usize, usize)> = foreground.indexed_iter().filter(|(_, &m)| m).map(|(ij, _)| ij).collect();
    if perm.len() != coords.len() {
        return Err(invalid(format!("permutation has {} entries for {} foreground voxels", perm.len(), coords.len())));
    }
    let mut out = img.clone();
    for (&(i, j), &k) in coords.iter().zip(perm) {
        let (si, sj) = coords[k];
        out.data[[i, j, frame]] = img.data[[si, sj, frame]];
    }
    Ok(out)
}

fn map_errors(input: &ImportanceInput, maps: &ParametricMaps) -> Result<[f64; N_MAPS]> {
    let mut e = [0.0; N_MAPS];
    for kind in MapKind::ALL {
        let mask = apply_exclusions(input.reference, input.foreground, kind);
        // all-zero references (pure-water FF) have no NRMSE; count them as 0
        e[kind.index()] = nrmse(input.reference.map(kind), maps.map(kind), Some(mask.view())).unwrap_or(0.0);
    }
    Ok(e)
}

fn reconstruct(input: &ImportanceInput, img: &MrfImage) -> Result<ParametricMaps> {
    reconstruct_image(input.net, img, input.grid, input.patch_size, Some(input.foreground.view()))
}

/// |ΔNRMSE| per map for one explicit permutation of frame `frame`.
pub fn importance_for_permutation(input: &ImportanceInput, frame: usize, perm: &[usize]) -> Result<[f64; N_MAPS]> {
    let base = map_errors(input, &reconstruct(input, input.image)?)?;
    let permuted = permute_frame(input.image, input.foreground, frame, perm)?;
    let e = map_errors(input, &reconstruct(input, &permuted)?)?;
    Ok(std::array::from_fn(|k| (e[k] - base[k]).abs()))
}

/// Importance of every frame in `frames`, averaged over `seeds`.
pub fn frame_importances(input: &ImportanceInput, frames: &[usize], seeds: &[u64]) -> Result<Vec<FrameImportance>> {
    if seeds.is_empty() {
        return Err(invalid("permutation importance needs at least one seed"));
    }
    let base = map_errors(input, &reconstruct(input, input.image)?)?;
    let n = input.foreground.iter().filter(|&&m| m).count();
    frames
        .iter()
        .map(|&frame| {
            let mut acc = [0.0; N_MAPS];
            for &seed in seeds {
                let permuted = permute_frame(input.image, input.foreground, frame, &frame_permutation(n, frame, seed))?;
                let e = map_errors(input, &reconstruct(input, &permuted)?)?;
                for k in 0..N_MAPS {
                    acc[k] += (e[k] - base[k]).abs() / seeds.len() as f64;
                }
            }
            Ok(FrameImportance { frame, importance: acc })
        })
        .collect()
}

/// Importance of a single frame, averaged over `seeds`.
pub fn permutation_importance(input: &ImportanceInput, frame: usize, seeds: &[u64]) -> Result<[f64; N_MAPS]> {
    Ok(frame_importances(input, &[frame], seeds)?[0].importance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> Array2<f64> {
        Array2::from_shape_fn((10, 9), |(i, j)| (((i * 7 + j * 3) % 11) * 10) as f64 + if i == j { 25.0 } else { 0.0 })
    }

    #[test]
    fn identity_cases() {
        let r = toy();
        assert_eq!(nrmse(r.view(), r.view(), None).unwrap(), 0.0);
        assert_eq!(psnr(r.view(), r.view(), None).unwrap(), f64::INFINITY);
        assert!((ssim(r.view(), r.view()).unwrap() - 1.0).abs() < 1e-12);
        let z = Array2::zeros(r.dim());
        assert!((nrmse(r.view(), z.view(), None).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_offset_hand_computed() {
        let r = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let c = 0.5;
        let p = &r + c;
        // ‖ref‖² = 285
        let expected = c * 3.0 / 285f64.sqrt();
        assert!((nrmse(r.view(), p.view(), None).unwrap() - expected).abs() < 1e-15);
        let expected_psnr = 10.0 * (81.0 / 0.25f64).log10();
        assert!((psnr(r.view(), p.view(), None).unwrap() - expected_psnr).abs() < 1e-12);
        let mask = array![[true, false, false], [false, false, false], [false, false, true]];
        let masked = nrmse(r.view(), p.view(), Some(mask.view())).unwrap();
        assert!((masked - c * 2f64.sqrt() / 82f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn error_cases() {
        let r = toy();
        let none = Array2::from_elem(r.dim(), false);
        assert!(nrmse(r.view(), r.view(), Some(none.view())).is_err());
        let z = Array2::<f64>::zeros((4, 4));
        assert!(nrmse(z.view(), z.view(), None).is_err());
        assert!(ssim(z.view(), z.view()).is_err());
        assert!(nrmse(r.view(), z.view(), None).is_err());
    }

    #[test]
    fn ssim_matches_reference_implementation() {
        let r = toy();
        let mut p = r.clone();
        p.slice_mut(ndarray::s![2..9, 1..8]).mapv_inplace(|v| v * 2.0);
        // scikit-image structural_similarity(win_size=7, data_range=max(ref))
        assert!((ssim(r.view(), p.view()).unwrap() - 0.6402641849762652).abs() < 1e-12);
        let q = Array2::from_shape_fn(r.dim(), |(i, j)| r[(i, j)] + ((i * 5 + j) % 3) as f64 - 1.0);
        assert!((ssim(r.view(), q.view()).unwrap() - 0.9997090091902038).abs() < 1e-12);
    }

    #[test]
    fn ssim_single_window_by_hand() {
        let r = Array2::from_shape_fn((7, 7), |(i, j)| (i * 7 + j) as f64);
        let p = r.mapv(|v| 2.0 * v);
        let n = 49.0;
        let mx = r.sum() / n;
        let vx = r.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / (n - 1.0);
        let (my, vy, vxy) = (2.0 * mx, 4.0 * vx, 2.0 * vx);
        let l = 48.0;
        let (c1, c2) = ((0.01 * l) * (0.01 * l), (0.03 * l) * (0.03 * l));
        let expected = ((2.0 * mx * my + c1) * (2.0 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        let got = ssim(r.view(), p.view()).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!(got < 1.0);
    }

    #[test]
    fn ssim_of_equal_constants_is_one() {
        let c = Array2::from_elem((8, 8), 3.5);
        assert!((ssim(c.view(), c.view()).unwrap() - 1.0).abs() < 1e-15);
        let z = Array2::<f64>::zeros((8, 8));
        assert!((ssim(z.view(), z.view()).unwrap() - 1.0).abs() < 1e-15);
    }

    fn pairs_from(refs: &[f64], preds: &[f64]) -> Vec<RoiPair> {
        refs.iter()
            .zip(preds)
            .enumerate()
            .map(|(i, (&r, &p))| RoiPair { slice: 0, roi_id: i as u32 + 1, map: MapKind::T1H2o, ref_mean: r, pred_mean: p })
            .collect()
    }

    #[test]
    fn regression_identity_and_offset() {
        let r = [600.0, 800.0, 1000.0, 1300.0];
        let same = pairs_from(&r, &r);
        let reg = roi_regression(&same).unwrap();
        assert!((reg.r2 - 1.0).abs() < 1e-15);
        let ba = bland_altman(&same).unwrap();
        assert_eq!((ba.bias, ba.lower, ba.upper), (0.0, 0.0, 0.0));
        let shifted: Vec<f64> = r.iter().map(|v| v + 10.0).collect();
        let off = pairs_from(&r, &shifted);
        assert!((roi_regression(&off).unwrap().r2 - 1.0).abs() < 1e-15);
        assert!((bland_altman(&off).unwrap().bias - 10.0).abs() < 1e-12);
        assert!(roi_regression(&pairs_from(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0])).is_err());
        assert!(roi_regression(&pairs_from(&[1.0, 2.0], &[1.0, 2.0])).is_err());
    }

    #[test]
    fn regression_matches_scipy_on_twenty_pairs() {
        let refs: Vec<f64> = (0..20).map(|i| 500.0 + 40.0 * i as f64).collect();
        let preds: Vec<f64> = (0..20)
            .map(|i| refs[i] * 0.95 + 30.0 + (((i * 37) % 11) as f64 - 5.0) * 4.0)
            .collect();
        let pairs = pairs_from(&refs, &preds);
        let reg = roi_regression(&pairs).unwrap();
        // scipy.stats.linregress
        assert!((reg.slope - 0.9629323308270676).abs() < 1e-12);
        assert!((reg.intercept - 18.61954887218053).abs() < 1e-9);
        assert!((reg.r2 - 0.99675281459228).abs() < 1e-12);
        let ba = bland_altman(&pairs).unwrap();
        assert!((ba.bias + 14.0).abs() < 1e-12);
        assert!((ba.lower + 44.747975200773276).abs() < 1e-9);
        assert!((ba.upper - 16.747975200773276).abs() < 1e-9);
    }

    fn five_region_maps() -> (ParametricMaps, Array2<u32>) {
        let labels = Array2::from_shape_fn((10, 10), |(y, x)| if y == 0 { 0 } else { (x / 2) as u32 + 1 });
        let ffs = [0.0, 0.8, 0.3, 0.75, 0.7];
        let mut maps = ParametricMaps::zeros(10, 10);
        for ((y, x), &l) in labels.indexed_iter() {
            if l > 0 {
                maps.data[(0, y, x)] = ffs[l as usize - 1];
                maps.data[(1, y, x)] = 600.0 + 100.0 * l as f64;
            }
        }
        (maps, labels)
    }

    #[test]
    fn exclusion_counts() {
        let (maps, labels) = five_region_maps();
        let fg = labels.mapv(|l| l != 0);
        // regions 1, 3, 5 survive: 3 regions × 2 columns × 9 rows
        assert_eq!(apply_exclusions(&maps, &fg, MapKind::T1H2o).iter().filter(|&&m| m).count(), 54);
        assert_eq!(apply_exclusions(&maps, &fg, MapKind::Ff), fg);
        let water = ParametricMaps::zeros(10, 10);
        let all = Array2::from_elem((10, 10), true);
        assert_eq!(apply_exclusions(&water, &all, MapKind::T1H2o), all);
    }

    #[test]
    fn exclusions_touch_only_t1_h2o() {
        let (maps, labels) = five_region_maps();
        let mut pred = maps.clone();
        pred.data.mapv_inplace(|v| v * 1.05 + 0.01);
        let report = evaluate(std::slice::from_ref(&maps), &[pred.clone()], std::slice::from_ref(&labels)).unwrap();
        assert_eq!(report.map(MapKind::T1H2o).n_rois, 3);
        assert_eq!(report.map(MapKind::Ff).n_rois, 5);
        // same FF numbers as a direct computation with the plain foreground
        let fg = labels.mapv(|l| l != 0);
        let direct = nrmse(maps.map(MapKind::Ff), pred.map(MapKind::Ff), Some(fg.view())).unwrap();
        assert_eq!(report.map(MapKind::Ff).nrmse.mean, direct);
        let excl = apply_exclusions(&maps, &fg, MapKind::T1H2o);
        let direct = nrmse(maps.map(MapKind::T1H2o), pred.map(MapKind::T1H2o), Some(excl.view())).unwrap();
        assert_eq!(report.map(MapKind::T1H2o).nrmse.mean, direct);
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.maps.len(), 5);
        assert!(roi_csv(&report.roi_pairs).starts_with("roi_id,map,ref_mean,pred_mean"));
    }

    #[test]
    fn perfect_prediction_report() {
        let (maps, labels) = five_region_maps();
        let report = evaluate(std::slice::from_ref(&maps), std::slice::from_ref(&maps), &[labels]).unwrap();
        let t1 = report.map(MapKind::T1H2o);
        assert_eq!(t1.nrmse.mean, 0.0);
        assert_eq!(t1.psnr.mean, f64::INFINITY);
        assert!(serde_json::to_string(&report).unwrap().contains("\"inf\""));
    }

    #[test]
    fn blurriness_of_constant_is_zero() {
        let c = Array2::from_elem((16, 16), 7.0);
        assert!(blurriness(c.view(), &default_thresholds()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn box_blur_reduces_high_frequency_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Array2::from_shape_fn((64, 64), |(y, x)| ((y / 8 + x / 8) % 2) as f64 * 100.0 + rng.gen_range(0.0..20.0));
        let blurred = Array2::from_shape_fn((64, 64), |(y, x)| {
            let mut s = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, 63) as usize;
                    let xx = (x as i64 + dx).clamp(0, 63) as usize;
                    s += m[(yy, xx)];
                }
            }
            s / 9.0
        });
        let t = default_thresholds();
        assert_eq!(t.len(), 9);
        let a = blurriness(m.view(), &t);
        let b = blurriness(blurred.view(), &t);
        for (x, y) in a.iter().zip(&b) {
            assert!(y < x, "{y} !< {x}");
        }
        let shifted = m.mapv(|v| v + 1e3);
        for (x, y) in a.iter().zip(blurriness(shifted.view(), &t)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn white_noise_follows_area_fraction() {
        let t = default_thresholds();
        let mut acc = vec![0.0; t.len()];
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Array2::from_shape_fn((64, 64), |_| rng.gen_range(-1.0..1.0));
            for (a, v) in acc.iter_mut().zip(blurriness(m.view(), &t)) {
                *a += v / 100.0;
            }
        }
        for (thr, got) in t.iter().zip(&acc) {
            // area of the normalized square [-1, 1]^2 outside radius thr
            let expected = 1.0 - std::f64::consts::PI * thr * thr / 4.0;
            assert!((got - expected).abs() < 0.05 * expected, "{thr}: {got} vs {expected}");
        }
    }

    #[test]
    fn stat_handles_edge_cases() {
        let s = Stat::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(Stat::of(&[4.0]).std, 0.0);
        assert!(Stat::of(&[]).mean.is_nan());
    }

    mod importance {
        use super::super::*;
        use crate::archgen::{build_architecture, ArchConfig};
        use crate::nn::LayerOrder;
        use crate::phantom::{forward_simulate, generate_phantom, Phantom};
        use crate::signal::SequenceTrain;
        use ndarray::Axis;

        const T: usize = 8;

        fn setup(seed: u64) -> (Network<f32>, Phantom, MrfImage, ParameterGrid) {
            let grid = ParameterGrid::desk_default();
            let p = generate_phantom(20, 20, 4, seed, &grid, true).unwrap();
            let img = forward_simulate(&p, &SequenceTrain::default_train(T)).unwrap();
            let spec = build_architecture(&ArchConfig {
                receptive_field: 3,
                n_params: 4_000,
                n_nonlinearities: 4,
                c_s_stop: 8,
                c_s_dec: 4,
                c_t_stop: 8,
                c_t_dec: 4,
                input_channels: 2 * T,
                output_channels: N_MAPS,
            })
            .unwrap();
            (Network::new(&spec, LayerOrder::default(), seed).unwrap(), p, img, grid)
        }

        fn input<'a>(net: &'a Network<f32>, p: &'a Phantom, img: &'a MrfImage, grid: &'a ParameterGrid) -> ImportanceInput<'a> {
            ImportanceInput { net, image: img, reference: &p.maps, foreground: &p.foreground_mask, grid, patch_size: 8 }
        }

        #[test]
        fn permutation_moves_values_within_foreground() {
            let (_, p, img, _) = setup(1);
            let n = p.foreground_mask.iter().filter(|&&m| m).count();
            let out = permute_frame(&img, &p.foreground_mask, 2, &frame_permutation(n, 2, 9)).unwrap();
            for t in 0..T {
                let mut a: Vec<_> = img.data.index_axis(Axis(2), t).iter().map(|c| (c.re, c.im)).collect();
                let mut b: Vec<_> = out.data.index_axis(Axis(2), t).iter().map(|c| (c.re, c.im)).collect();
                if t != 2 {
                    assert_eq!(a, b);
                }
                a.sort_by(|x, y| x.partial_cmp(y).unwrap());
                b.sort_by(|x, y| x.partial_cmp(y).unwrap());
                assert_eq!(a, b);
            }
            ndarray::Zip::from(&p.foreground_mask).and(img.data.index_axis(Axis(2), 2)).and(out.data.index_axis(Axis(2), 2)).for_each(
                |&m, a, b| {
                    if !m {
                        assert_eq!(a, b);
                    }
                },
            );
        }

        #[test]
        fn identity_permutation_has_zero_importance() {
            let (net, p, img, grid) = setup(2);
            let n = p.foreground_mask.iter().filter(|&&m| m).count();
            let id: Vec<usize> = (0..n).collect();
            let imp = importance_for_permutation(&input(&net, &p, &img, &grid), 3, &id).unwrap();
            assert_eq!(imp, [0.0; N_MAPS]);
        }

        #[test]
        fn dead_frame_has_zero_importance() {
            let (mut net, p, img, grid) = setup(3);
            net.zero_input_channel(5);
            net.zero_input_channel(T + 5);
            let inp = input(&net, &p, &img, &grid);
            assert_eq!(permutation_importance(&inp, 5, &[1, 2]).unwrap(), [0.0; N_MAPS]);
            assert!(permutation_importance(&inp, 4, &[1, 2]).unwrap().iter().any(|&v| v > 0.0));
        }

        #[test]
        fn importance_is_deterministic() {
            let (net, p, img, grid) = setup(4);
            let inp = input(&net, &p, &img, &grid);
            let a = frame_importances(&inp, &[0, 3, 7], &[11, 12]).unwrap();
            let b = frame_importances(&inp, &[0, 3, 7], &[11, 12]).unwrap();
            assert_eq!(a, b);
            assert!(frame_importances(&inp, &[0], &[]).is_err());
            assert!(frame_importances(&inp, &[T], &[1]).is_err());
        }
    }
}
