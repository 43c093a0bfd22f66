//! Two-pool (water/fat) spoiled-FLASH fingerprint simulation and dictionary
//! construction.
//!
//! Each pool starts at `-M0` after a non-selective inversion (or `+M0`
//! without one). Frame `i` tips the longitudinal magnetization by the
//! effective angle `b1 * FA_i`, records `Mz * sin(b1 * FA_i)` dephased by the
//! pool's off-resonance over `TE_i`, then relaxes for `TR_i`. Transverse
//! magnetization is assumed perfectly spoiled and T2/T2* are ignored.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::types::{Fingerprint, MapKind, N_MAPS};

/// Chemical shift of the fat pool at 3 T (3.4 ppm), in Hz.
pub const FAT_SHIFT_HZ: f64 = -440.0;

/// Equilibrium magnetization. Absolute scale disappears after normalization.
const M0: f64 = 1.0;

/// Default atom budget guarding against accidental giant dictionaries.
pub const DEFAULT_ATOM_BUDGET: u64 = 20_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceTrain {
    pub flip_angle_deg: Vec<f64>,
    pub repetition_time_ms: Vec<f64>,
    pub echo_time_ms: Vec<f64>,
    /// Non-selective inversion before the first frame.
    pub inversion: bool,
}

impl SequenceTrain {
    pub fn new(
        flip_angle_deg: Vec<f64>,
        repetition_time_ms: Vec<f64>,
        echo_time_ms: Vec<f64>,
        inversion: bool,
    ) -> Result<Self> {
        let seq = SequenceTrain { flip_angle_deg, repetition_time_ms, echo_time_ms, inversion };
        seq.validate()?;
        Ok(seq)
    }

    pub fn frames(&self) -> usize {
        self.flip_angle_deg.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.flip_angle_deg.len();
        if t == 0 {
            return Err(invalid("sequence train needs at least one frame"));
        }
        if self.repetition_time_ms.len() != t || self.echo_time_ms.len() != t {
            return Err(Error::DimensionMismatch {
                expected: format!("{t} frames in every train array"),
                got: format!(
                    "TR {} / TE {}",
                    self.repetition_time_ms.len(),
                    self.echo_time_ms.len()
                ),
            });
        }
        for i in 0..t {
            let fa = self.flip_angle_deg[i];
            let tr = self.repetition_time_ms[i];
            let te = self.echo_time_ms[i];
            if !(fa > 0.0 && fa <= 180.0) {
                return Err(invalid(format!("frame {i}: flip angle {fa} outside (0, 180]")));
            }
            if !(te > 0.0 && tr > te) || !tr.is_finite() {
                return Err(invalid(format!("frame {i}: need TR > TE > 0, got TR={tr} TE={te}")));
            }
        }
        Ok(())
    }

    /// Frames at which the default train switches segment. Proportional to
    /// frames 75, 100, 125 and 150 of a 175-frame acquisition.
    pub fn default_breakpoints(frames: usize) -> [usize; 4] {
        [75, 100, 125, 150].map(|b| ((b * frames) as f64 / 175.0).round() as usize)
    }

    /// Piecewise default train of `frames` frames, inversion enabled.
    ///
    /// Segment 0 ramps the flip angle from 10° to 60° with cycling echo
    /// times; the remaining segments hold constant flip angles (5°, 35°, 15°,
    /// 25°). The last segment alternates TE between 1.2 ms (fat/water out of
    /// phase) and 2.3 ms (in phase).
    pub fn default_train(frames: usize) -> Self {
        assert!(frames >= 1, "default train needs at least one frame");
        let bp = Self::default_breakpoints(frames);
        let ramp_len = bp[0].max(1);
        let mut fa = Vec::with_capacity(frames);
        let mut tr = Vec::with_capacity(frames);
        let mut te = Vec::with_capacity(frames);
        for i in 0..frames {
            let segment = bp.iter().filter(|&&b| i >= b).count();
            let (f, r, e) = match segment {
                0 => {
                    let u = i as f64 / (ramp_len.saturating_sub(1)).max(1) as f64;
                    (10.0 + 50.0 * (0.5 * PI * u).sin(), 8.0, [1.2, 2.3, 3.45][i % 3])
                }
                1 => (5.0, 4.0, 2.3),
                2 => (35.0, 6.0, 3.45),
                3 => (15.0, 4.0, 1.2),
                _ => (25.0, 5.0, if i % 2 == 0 { 1.2 } else { 2.3 }),
            };
            fa.push(f);
            tr.push(r);
            te.push(e);
        }
        SequenceTrain {
            flip_angle_deg: fa,
            repetition_time_ms: tr,
            echo_time_ms: te,
            inversion: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    pub ff: f64,
    pub t1_h2o: f64,
    pub t1_fat: f64,
    pub delta_f: f64,
    pub b1: f64,
}

impl TissueParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ff) {
            return Err(invalid(format!("ff {} outside [0, 1]", self.ff)));
        }
        if !(self.t1_h2o > 0.0 && self.t1_fat > 0.0) {
            return Err(invalid("T1 values must be positive"));
        }
        if !(self.b1 > 0.0) {
            return Err(invalid(format!("b1 {} must be positive", self.b1)));
        }
        if !self.delta_f.is_finite() {
            return Err(invalid("delta_f must be finite"));
        }
        Ok(())
    }

    pub fn get(&self, kind: MapKind) -> f64 {
        match kind {
            MapKind::Ff => self.ff,
            MapKind::T1H2o => self.t1_h2o,
            MapKind::T1Fat => self.t1_fat,
            MapKind::DeltaF => self.delta_f,
            MapKind::B1 => self.b1,
        }
    }

    pub fn to_array(&self) -> [f64; N_MAPS] {
        MapKind::ALL.map(|k| self.get(k))
    }

    pub fn from_array(v: [f64; N_MAPS]) -> Self {
        TissueParams { ff: v[0], t1_h2o: v[1], t1_fat: v[2], delta_f: v[3], b1: v[4] }
    }
}

/// Signal of a single pool with longitudinal relaxation `t1` and total
/// off-resonance `off_resonance_hz`.
pub fn pool_signal(seq: &SequenceTrain, t1: f64, off_resonance_hz: f64, b1: f64) -> Fingerprint {
    let mut mz = if seq.inversion { -M0 } else { M0 };
    let mut out = Vec::with_capacity(seq.frames());
    for ((&fa, &tr), &te) in seq
        .flip_angle_deg
        .iter()
        .zip(&seq.repetition_time_ms)
        .zip(&seq.echo_time_ms)
    {
        let alpha = b1 * fa.to_radians();
        let phase = 2.0 * PI * off_resonance_hz * te * 1e-3;
        out.push(Complex64::from_polar(mz * alpha.sin(), phase));
        mz = M0 + (mz * alpha.cos() - M0) * (-tr / t1).exp();
    }
    out
}

fn simulate_unchecked(seq: &SequenceTrain, tissue: &TissueParams) -> Fingerprint {
    let water = pool_signal(seq, tissue.t1_h2o, tissue.delta_f, tissue.b1);
    let fat = pool_signal(seq, tissue.t1_fat, tissue.delta_f + FAT_SHIFT_HZ, tissue.b1);
    water
        .iter()
        .zip(&fat)
        .map(|(w, f)| w * (1.0 - tissue.ff) + f * tissue.ff)
        .collect()
}

/// Fingerprint of a voxel: `(1 - ff) * water + ff * fat`.
pub fn simulate_fingerprint(seq: &SequenceTrain, tissue: &TissueParams) -> Result<Fingerprint> {
    seq.validate()?;
    tissue.validate()?;
    Ok(simulate_unchecked(seq, tissue))
}

/// Axis description: either explicit values or `[start, step, stop]` segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisSpec {
    Segments { segments: Vec<[f64; 3]> },
    Values { values: Vec<f64> },
}

impl AxisSpec {
    pub fn expand(&self) -> Result<Vec<f64>> {
        let mut values = match self {
            AxisSpec::Values { values } => values.clone(),
            AxisSpec::Segments { segments } => {
                let mut out = Vec::new();
                for &[start, step, stop] in segments {
                    if !(step > 0.0) || stop < start {
                        return Err(invalid(format!(
                            "bad segment [{start}, {step}, {stop}]: need step > 0 and stop >= start"
                        )));
                    }
                    let n = ((stop - start) / step + 1e-9).floor() as usize;
                    out.extend((0..=n).map(|i| tidy(start + i as f64 * step)));
                }
                out
            }
        };
        values.iter_mut().for_each(|v| *v = tidy(*v));
        if values.is_empty() {
            return Err(invalid("empty grid axis"));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("grid axis values must be strictly increasing"));
        }
        Ok(values)
    }
}

// Strip accumulated floating-point noise such as 0.30000000000000004.
fn tidy(v: f64) -> f64 {
    let r = (v * 1e9).round() / 1e9;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Per-parameter sorted value lists. The dictionary is their Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct ParameterGrid {
    axes: [Vec<f64>; N_MAPS],
}

/// JSON form of a [`ParameterGrid`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub ff: AxisSpec,
    pub t1_h2o: AxisSpec,
    pub t1_fat: AxisSpec,
    pub delta_f: AxisSpec,
    pub b1: AxisSpec,
}

impl TryFrom<GridSpec> for ParameterGrid {
    type Error = Error;

    fn try_from(spec: GridSpec) -> Result<Self> {
        Ok(ParameterGrid {
            axes: [
                spec.ff.expand()?,
                spec.t1_h2o.expand()?,
                spec.t1_fat.expand()?,
                spec.delta_f.expand()?,
                spec.b1.expand()?,
            ],
        })
    }
}

impl From<ParameterGrid> for GridSpec {
    fn from(g: ParameterGrid) -> Self {
        let [ff, t1_h2o, t1_fat, delta_f, b1] = g.axes.map(|values| AxisSpec::Values { values });
        GridSpec { ff, t1_h2o, t1_fat, delta_f, b1 }
    }
}

impl ParameterGrid {
    pub fn new(axes: [Vec<f64>; N_MAPS]) -> Result<Self> {
        let spec = GridSpec::from(ParameterGrid { axes });
        ParameterGrid::try_from(spec)
    }

    /// FF 0:0.1:1, T1_H2O 600:100:1400 ms, T1_fat 250:50:400 ms,
    /// Δf -60:20:60 Hz, B1 0.6:0.1:1, 13,860 atoms.
    pub fn desk_default() -> Self {
        ParameterGrid::try_from(GridSpec {
            ff: AxisSpec::Segments { segments: vec![[0.0, 0.1, 1.0]] },
            t1_h2o: AxisSpec::Segments { segments: vec![[600.0, 100.0, 1400.0]] },
            t1_fat: AxisSpec::Segments { segments: vec![[250.0, 50.0, 400.0]] },
            delta_f: AxisSpec::Segments { segments: vec![[-60.0, 20.0, 60.0]] },
            b1: AxisSpec::Segments { segments: vec![[0.6, 0.1, 1.0]] },
        })
        .expect("static grid is valid")
    }

    /// The sampling used for the clinical dictionary (about 7.2 million atoms).
    pub fn clinical() -> Self {
        ParameterGrid::try_from(GridSpec {
            ff: AxisSpec::Segments { segments: vec![[0.0, 0.05, 1.0]] },
            t1_h2o: AxisSpec::Segments {
                segments: vec![[550.0, 10.0, 1600.0], [1650.0, 50.0, 2000.0]],
            },
            t1_fat: AxisSpec::Segments { segments: vec![[225.0, 25.0, 400.0]] },
            delta_f: AxisSpec::Segments { segments: vec![[-120.0, 10.0, 120.0]] },
            b1: AxisSpec::Segments { segments: vec![[0.3, 0.05, 1.0]] },
        })
        .expect("static grid is valid")
    }

    pub fn axis(&self, kind: MapKind) -> &[f64] {
        &self.axes[kind.index()]
    }

    pub fn axes(&self) -> &[Vec<f64>; N_MAPS] {
        &self.axes
    }

    pub fn min(&self, kind: MapKind) -> f64 {
        self.axis(kind)[0]
    }

    pub fn max(&self, kind: MapKind) -> f64 {
        *self.axis(kind).last().unwrap()
    }

    /// Number of grid points, computed without overflow.
    pub fn size(&self) -> u128 {
        self.axes.iter().map(|a| a.len() as u128).product()
    }

    /// Grid point at flat index `idx`, row-major with B1 varying fastest.
    pub fn point(&self, mut idx: usize) -> TissueParams {
        let mut v = [0.0; N_MAPS];
        for k in (0..N_MAPS).rev() {
            let n = self.axes[k].len();
            v[k] = self.axes[k][idx % n];
            idx /= n;
        }
        TissueParams::from_array(v)
    }

    pub fn contains(&self, kind: MapKind, value: f64) -> bool {
        self.axis(kind).contains(&value)
    }

    /// Whether `value` lies inside the axis range.
    pub fn in_range(&self, kind: MapKind, value: f64) -> bool {
        value >= self.min(kind) && value <= self.max(kind)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DictionaryOptions {
    pub normalize: bool,
    pub atom_budget: u64,
}

impl Default for DictionaryOptions {
    fn default() -> Self {
        DictionaryOptions { normalize: true, atom_budget: DEFAULT_ATOM_BUDGET }
    }
}

#[derive(Debug, Clone)]
pub struct Dictionary {
    /// `(n_atoms, T)` atom matrix.
    pub atoms: Array2<Complex64>,
    pub params: Vec<TissueParams>,
    /// L2 norm of every atom before normalization.
    pub norms: Vec<f64>,
    pub normalized: bool,
    pub grid: ParameterGrid,
}

impl Dictionary {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.atoms.ncols()
    }
}

/// Simulate one atom per grid point.
pub fn build_dictionary(
    seq: &SequenceTrain,
    grid: &ParameterGrid,
    opts: DictionaryOptions,
) -> Result<Dictionary> {
    seq.validate()?;
    let n = grid.size();
    if n > opts.atom_budget as u128 {
        return Err(Error::AtomBudgetExceeded { requested: n, budget: opts.atom_budget });
    }
    let n = n as usize;
    let t = seq.frames();
    let params: Vec<TissueParams> = (0..n).map(|i| grid.point(i)).collect();
    for p in &params {
        p.validate()?;
    }
    let rows: Vec<(Fingerprint, f64)> = params
        .par_iter()
        .map(|p| {
            let mut fp = simulate_unchecked(seq, p);
            let norm = fp.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            if opts.normalize && norm > 0.0 {
                fp.iter_mut().for_each(|c| *c /= norm);
            }
            (fp, norm)
        })
        .collect();
    let mut atoms = Array2::zeros((n, t));
    let mut norms = Vec::with_capacity(n);
    for (i, (fp, norm)) in rows.into_iter().enumerate() {
        atoms.row_mut(i).iter_mut().zip(fp).for_each(|(a, v)| *a = v);
        norms.push(norm);
    }
    Ok(Dictionary { atoms, params, norms, normalized: opts.normalize, grid: grid.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tissue() -> TissueParams {
        TissueParams { ff: 0.3, t1_h2o: 900.0, t1_fat: 300.0, delta_f: 20.0, b1: 0.9 }
    }

    #[test]
    fn pure_pools_ignore_the_other_t1() {
        let seq = SequenceTrain::default_train(32);
        let mut a = tissue();
        a.ff = 0.0;
        let mut b = a;
        b.t1_fat = 400.0;
        assert_eq!(simulate_fingerprint(&seq, &a).unwrap(), simulate_fingerprint(&seq, &b).unwrap());
        let water = pool_signal(&seq, a.t1_h2o, a.delta_f, a.b1);
        assert_eq!(simulate_fingerprint(&seq, &a).unwrap(), water);

        a.ff = 1.0;
        b = TissueParams { t1_h2o: 1400.0, ..a };
        assert_eq!(simulate_fingerprint(&seq, &a).unwrap(), simulate_fingerprint(&seq, &b).unwrap());
        let fat = pool_signal(&seq, a.t1_fat, a.delta_f + FAT_SHIFT_HZ, a.b1);
        assert_eq!(simulate_fingerprint(&seq, &a).unwrap(), fat);
    }

    // Closed-form per-frame evaluation written independently of pool_signal.
    fn reference_frame(seq: &SequenceTrain, p: &TissueParams, frame: usize) -> Complex64 {
        let mut total = Complex64::new(0.0, 0.0);
        for (weight, t1, shift) in [(1.0 - p.ff, p.t1_h2o, 0.0), (p.ff, p.t1_fat, -440.0)] {
            let mut mz: f64 = if seq.inversion { -1.0 } else { 1.0 };
            for i in 0..frame {
                let a = p.b1 * seq.flip_angle_deg[i] * PI / 180.0;
                let e1 = (-seq.repetition_time_ms[i] / t1).exp();
                mz = mz * a.cos() * e1 + (1.0 - e1);
            }
            let a = p.b1 * seq.flip_angle_deg[frame] * PI / 180.0;
            let ph = 2.0 * PI * (p.delta_f + shift) * seq.echo_time_ms[frame] / 1000.0;
            total += Complex64::new(ph.cos(), ph.sin()) * (weight * mz * a.sin());
        }
        total
    }

    #[test]
    fn off_resonance_only_rotates_phase() {
        let seq = SequenceTrain::default_train(32);
        let a = tissue();
        let mut b = a;
        b.delta_f = -40.0;
        let fa = simulate_fingerprint(&seq, &a).unwrap();
        let fb = simulate_fingerprint(&seq, &b).unwrap();
        for i in 0..seq.frames() {
            assert!((fa[i].norm() - fb[i].norm()).abs() < 1e-12);
            let expected = 2.0 * PI * (a.delta_f - b.delta_f) * seq.echo_time_ms[i] * 1e-3;
            let rotated = fb[i] * Complex64::from_polar(1.0, expected);
            assert!((rotated - fa[i]).norm() < 1e-12, "frame {i}");
            assert!((fa[i] - reference_frame(&seq, &a, i)).norm() < 1e-12);
            assert!((fb[i] - reference_frame(&seq, &b, i)).norm() < 1e-12);
        }
    }

    #[test]
    fn mixing_is_affine_in_ff() {
        let seq = SequenceTrain::default_train(32);
        let mut p = tissue();
        p.ff = 0.0;
        let f0 = simulate_fingerprint(&seq, &p).unwrap();
        p.ff = 1.0;
        let f1 = simulate_fingerprint(&seq, &p).unwrap();
        p.ff = 0.5;
        let fh = simulate_fingerprint(&seq, &p).unwrap();
        for i in 0..seq.frames() {
            assert!((fh[i] - (f0[i] + f1[i]) * 0.5).norm() < 1e-14);
        }
    }

    #[test]
    fn inversion_makes_early_frames_t1_sensitive() {
        let seq = SequenceTrain::default_train(32);
        let t = seq.frames();
        for (t1, ff) in [(600.0, 0.0), (900.0, 0.3), (1300.0, 0.6)] {
            let a = TissueParams { ff, t1_h2o: t1, t1_fat: 300.0, delta_f: 0.0, b1: 1.0 };
            let b = TissueParams { t1_h2o: t1 + 100.0, ..a };
            let fa = simulate_fingerprint(&seq, &a).unwrap();
            let fb = simulate_fingerprint(&seq, &b).unwrap();
            let dist = |r: std::ops::Range<usize>| {
                r.map(|i| (fa[i] - fb[i]).norm_sqr()).sum::<f64>().sqrt()
            };
            assert!(dist(0..t / 4) > dist(t - t / 4..t), "t1={t1} ff={ff}");
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let seq = SequenceTrain::default_train(175);
        let a = simulate_fingerprint(&seq, &tissue()).unwrap();
        let b = simulate_fingerprint(&seq, &tissue()).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.re.to_bits() == y.re.to_bits()
            && x.im.to_bits() == y.im.to_bits()));
    }

    #[test]
    fn default_trains_respect_invariants() {
        for t in [1, 4, 8, 32, 175] {
            let seq = SequenceTrain::default_train(t);
            seq.validate().unwrap();
            assert_eq!(seq.frames(), t);
            assert!(seq.repetition_time_ms.iter().all(|&tr| (4.0..=8.0).contains(&tr)));
            assert!(seq.flip_angle_deg.iter().all(|&fa| (5.0..=60.0).contains(&fa)));
        }
        assert_eq!(SequenceTrain::default_breakpoints(175), [75, 100, 125, 150]);
        assert_eq!(SequenceTrain::default_breakpoints(32), [14, 18, 23, 27]);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let seq = SequenceTrain::default_train(8);
        let mut bad = seq.clone();
        bad.flip_angle_deg[2] = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = seq.clone();
        bad.echo_time_ms[0] = bad.repetition_time_ms[0];
        assert!(bad.validate().is_err());
        let mut bad = seq.clone();
        bad.echo_time_ms.pop();
        assert!(bad.validate().is_err());
        let p = TissueParams { ff: 1.2, ..tissue() };
        assert!(simulate_fingerprint(&seq, &p).is_err());
        let p = TissueParams { b1: 0.0, ..tissue() };
        assert!(simulate_fingerprint(&seq, &p).is_err());
    }

    #[test]
    fn grid_sizes() {
        let clinical = ParameterGrid::clinical();
        let lens: Vec<usize> = clinical.axes().iter().map(Vec::len).collect();
        assert_eq!(lens, vec![21, 114, 8, 25, 15]);
        assert_eq!(clinical.size(), 7_182_000);
        assert_eq!(ParameterGrid::desk_default().size(), 13_860);
        let one = ParameterGrid::new([
            vec![0.2],
            vec![800.0],
            vec![300.0],
            vec![0.0],
            vec![1.0],
        ])
        .unwrap();
        assert_eq!(one.size(), 1);
    }

    #[test]
    fn segment_expansion() {
        let axis = AxisSpec::Segments { segments: vec![[0.0, 0.1, 1.0]] };
        let v = axis.expand().unwrap();
        assert_eq!(v.len(), 11);
        assert_eq!(v[3], 0.3);
        assert_eq!(v[10], 1.0);
        let bad = AxisSpec::Values { values: vec![1.0, 1.0] };
        assert!(bad.expand().is_err());
        assert!(AxisSpec::Values { values: vec![] }.expand().is_err());
    }

    #[test]
    fn dictionary_order_and_normalization() {
        let seq = SequenceTrain::default_train(16);
        let grid = ParameterGrid::new([
            vec![0.0, 0.5],
            vec![700.0, 900.0],
            vec![300.0],
            vec![-20.0, 0.0, 20.0],
            vec![0.8, 1.0],
        ])
        .unwrap();
        let dict = build_dictionary(&seq, &grid, DictionaryOptions::default()).unwrap();
        assert_eq!(dict.len(), 24);
        assert_eq!(dict.params[1].b1, 1.0);
        assert_eq!(dict.params[2].delta_f, 0.0);
        assert_eq!(dict.params[12].ff, 0.5);
        for (i, row) in dict.atoms.rows().into_iter().enumerate() {
            let norm = row.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            let raw = simulate_fingerprint(&seq, &dict.params[i]).unwrap();
            for (a, r) in row.iter().zip(&raw) {
                assert!((a * dict.norms[i] - r).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn atom_budget_is_enforced() {
        let seq = SequenceTrain::default_train(8);
        let err = build_dictionary(
            &seq,
            &ParameterGrid::clinical(),
            DictionaryOptions { normalize: true, atom_budget: 1_000_000 },
        )
        .unwrap_err();
        assert!(matches!(err, Error::AtomBudgetExceeded { requested: 7_182_000, .. }));
    }

    #[test]
    fn grid_json_accepts_segments_and_values() {
        let json = r#"{
            "ff": {"segments": [[0, 0.5, 1]]},
            "t1_h2o": {"segments": [[550, 10, 570], [600, 50, 700]]},
            "t1_fat": {"values": [300]},
            "delta_f": {"values": [-10, 10]},
            "b1": {"values": [1.0]}
        }"#;
        let grid: ParameterGrid = serde_json::from_str(json).unwrap();
        assert_eq!(grid.axis(MapKind::T1H2o), &[550.0, 560.0, 570.0, 600.0, 650.0, 700.0]);
        assert_eq!(grid.size(), 3 * 6 * 2);
        let back: ParameterGrid =
            serde_json::from_str(&serde_json::to_string(&grid).unwrap()).unwrap();
        assert_eq!(back, grid);
    }
}
