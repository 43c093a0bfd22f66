//! Maximum-correlation dictionary matching, with optional truncated-SVD
//! compression of the dictionary.

use std::collections::HashMap;

use nalgebra::DMatrix;
use ndarray::{s, Array2, ArrayView2};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::signal::{Dictionary, ParameterGrid, TissueParams};
use crate::types::{MapKind, MrfImage, ParametricMaps};

/// Index reported for background (zero-norm) voxels.
pub const BACKGROUND: i64 = -1;

/// Voxels matched per GEMM call.
const VOXEL_CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub struct MatchResult {
    pub maps: ParametricMaps,
    /// Matched atom per voxel, [`BACKGROUND`] where unmatched.
    pub atom_index: Array2<i64>,
    /// Correlation of the matched atom, NaN for background voxels.
    pub correlation: Array2<f64>,
}

/// Value written to background voxels: 0 for FF and B1, the grid minimum
/// for T1_H2O, T1_fat and Δf.
pub fn background_value(grid: &ParameterGrid, kind: MapKind) -> f64 {
    match kind {
        MapKind::Ff | MapKind::B1 => 0.0,
        _ => grid.min(kind),
    }
}

fn l2(fp: &[Complex64]) -> f64 {
    fp.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Brute-force match of one fingerprint: argmax over atoms of
/// `|<fp / |fp|, atom>|`, lowest index on ties. `None` for a zero fingerprint.
pub fn match_voxel(fp: &[Complex64], dict: &Dictionary) -> Result<Option<(usize, f64)>> {
    if !dict.normalized {
        return Err(invalid("matching requires a normalized dictionary"));
    }
    if fp.len() != dict.frames() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} frames", dict.frames()),
            got: format!("{} frames", fp.len()),
        });
    }
    let norm = l2(fp);
    if norm == 0.0 || !norm.is_finite() {
        return Ok(None);
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, atom) in dict.atoms.rows().into_iter().enumerate() {
        let ip: Complex64 = atom.iter().zip(fp).map(|(a, x)| a.conj() * x).sum();
        let c = ip.norm() / norm;
        if c > best.1 {
            best = (i, c);
        }
    }
    Ok(Some((best.0, best.1.min(1.0))))
}

/// Real/imaginary split of an atom matrix plus a map from every atom to the
/// lowest-indexed atom that is bit-identical to it.
struct AtomBank {
    re: Array2<f64>,
    im: Array2<f64>,
    canonical: Vec<usize>,
}

impl AtomBank {
    fn new(atoms: ArrayView2<'_, Complex64>) -> Self {
        let re = atoms.mapv(|c| c.re);
        let im = atoms.mapv(|c| c.im);
        let mut first: HashMap<Vec<u64>, usize> = HashMap::new();
        let canonical = atoms
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let key: Vec<u64> =
                    row.iter().flat_map(|c| [c.re.to_bits(), c.im.to_bits()]).collect();
                *first.entry(key).or_insert(i)
            })
            .collect();
        AtomBank { re, im, canonical }
    }

    /// Match unit-norm queries stored column-wise in `(q_re, q_im)`.
    fn best(&self, q_re: &Array2<f64>, q_im: &Array2<f64>) -> Vec<(usize, f64)> {
        // <q, a> = sum conj(a) q = (ar.qr + ai.qi) + j (ar.qi - ai.qr)
        let real = self.re.dot(q_re) + self.im.dot(q_im);
        let imag = self.re.dot(q_im) - self.im.dot(q_re);
        (0..q_re.ncols())
            .map(|v| {
                let mut best = (0usize, f64::NEG_INFINITY);
                for (i, (r, m)) in real.column(v).iter().zip(imag.column(v)).enumerate() {
                    let c = r.hypot(*m);
                    if c > best.1 {
                        best = (i, c);
                    }
                }
                (self.canonical[best.0], best.1.min(1.0))
            })
            .collect()
    }
}

/// Linear map from fingerprint space to a reduced subspace.
#[derive(Debug, Clone)]
pub struct Projector {
    /// `(T, k)` leading right singular vectors of the dictionary.
    pub basis: Array2<Complex64>,
}

impl Projector {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn project(&self, fp: &[Complex64]) -> Vec<Complex64> {
        (0..self.rank())
            .map(|j| fp.iter().zip(self.basis.column(j)).map(|(x, v)| x * v).sum())
            .collect()
    }
}

/// Dictionary whose atoms live in the rank-k subspace. Compressed atoms are
/// re-normalized to unit length.
#[derive(Debug, Clone)]
pub struct CompressedDictionary {
    pub atoms: Array2<Complex64>,
    pub params: Vec<TissueParams>,
    pub grid: ParameterGrid,
    pub singular_values: Vec<f64>,
}

/// Truncated SVD of the atom matrix computed through the `T × T` Gram matrix.
pub fn compress_dictionary(
    dict: &Dictionary,
    rank: usize,
) -> Result<(CompressedDictionary, Projector)> {
    let t = dict.frames();
    if rank == 0 || rank > t.min(dict.len()) {
        return Err(invalid(format!("rank {rank} outside [1, {}]", t.min(dict.len()))));
    }
    let mut gram = DMatrix::<Complex64>::zeros(t, t);
    for row in dict.atoms.rows() {
        for i in 0..t {
            let ci = row[i].conj();
            for j in i..t {
                gram[(i, j)] += ci * row[j];
            }
        }
    }
    for i in 0..t {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)].conj();
        }
    }
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = Array2::<Complex64>::zeros((t, rank));
    for (col, &src) in order.iter().take(rank).enumerate() {
        for i in 0..t {
            basis[(i, col)] = eig.eigenvectors[(i, src)];
        }
    }
    let singular_values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()).collect();
    let projector = Projector { basis };
    let mut atoms = dict.atoms.dot(&projector.basis);
    for mut row in atoms.rows_mut() {
        let n = row.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if n > 0.0 {
            row.mapv_inplace(|c| c / n);
        }
    }
    Ok((
        CompressedDictionary {
            atoms,
            params: dict.params.clone(),
            grid: dict.grid.clone(),
            singular_values,
        },
        projector,
    ))
}

/// Voxel-wise matcher over a full image, either against the full dictionary
/// or a compressed one.
pub struct Matcher<'a> {
    bank: AtomBank,
    params: &'a [TissueParams],
    grid: &'a ParameterGrid,
    projector: Option<&'a Projector>,
}

impl<'a> Matcher<'a> {
    pub fn new(dict: &'a Dictionary) -> Result<Self> {
        if !dict.normalized {
            return Err(invalid("matching requires a normalized dictionary"));
        }
        Ok(Matcher {
            bank: AtomBank::new(dict.atoms.view()),
            params: &dict.params,
            grid: &dict.grid,
            projector: None,
        })
    }

    pub fn compressed(dict: &'a CompressedDictionary, projector: &'a Projector) -> Self {
        Matcher {
            bank: AtomBank::new(dict.atoms.view()),
            params: &dict.params,
            grid: &dict.grid,
            projector: Some(projector),
        }
    }

    fn frames(&self) -> usize {
        match self.projector {
            Some(p) => p.basis.nrows(),
            None => self.bank.re.ncols(),
        }
    }

    /// Match a batch of fingerprints; `None` marks zero-norm inputs.
    pub fn match_many(&self, fps: &[Vec<Complex64>]) -> Vec<Option<(usize, f64)>> {
        fps.par_chunks(VOXEL_CHUNK)
            .flat_map_iter(|chunk| self.match_chunk(chunk))
            .collect()
    }

    fn match_chunk(&self, chunk: &[Vec<Complex64>]) -> Vec<Option<(usize, f64)>> {
        let queries: Vec<Option<Vec<Complex64>>> = chunk
            .iter()
            .map(|fp| {
                let q = match self.projector {
                    Some(p) => p.project(fp),
                    None => fp.clone(),
                };
                let n = l2(&q);
                (n > 0.0 && n.is_finite()).then(|| q.into_iter().map(|c| c / n).collect())
            })
            .collect();
        let live: Vec<&Vec<Complex64>> = queries.iter().flatten().collect();
        if live.is_empty() {
            return vec![None; chunk.len()];
        }
        let dim = live[0].len();
        let mut q_re = Array2::zeros((dim, live.len()));
        let mut q_im = Array2::zeros((dim, live.len()));
        for (v, q) in live.iter().enumerate() {
            for (i, c) in q.iter().enumerate() {
                q_re[(i, v)] = c.re;
                q_im[(i, v)] = c.im;
            }
        }
        let mut best = self.bank.best(&q_re, &q_im).into_iter();
        queries.iter().map(|q| q.as_ref().and_then(|_| best.next())).collect()
    }

    pub fn match_image(&self, img: &MrfImage, mask: Option<&Array2<bool>>) -> Result<MatchResult> {
        let (h, w, t) = img.data.dim();
        if t != self.frames() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} frames", self.frames()),
                got: format!("{t} frames"),
            });
        }
        if let Some(m) = mask {
            if m.dim() != (h, w) {
                return Err(Error::DimensionMismatch {
                    expected: format!("{h}x{w} mask"),
                    got: format!("{}x{} mask", m.dim().0, m.dim().1),
                });
            }
        }
        let zero = vec![Complex64::new(0.0, 0.0); t];
        let fps: Vec<Vec<Complex64>> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                if mask.is_none_or(|m| m[(y, x)]) {
                    img.data.slice(s![y, x, ..]).to_vec()
                } else {
                    zero.clone()
                }
            })
            .collect();
        let matches = self.match_many(&fps);

        let mut maps = ParametricMaps::zeros(h, w);
        for kind in MapKind::ALL {
            maps.map_mut(kind).fill(background_value(self.grid, kind));
        }
        let mut atom_index = Array2::from_elem((h, w), BACKGROUND);
        let mut correlation = Array2::from_elem((h, w), f64::NAN);
        for (i, m) in matches.into_iter().enumerate() {
            let (y, x) = (i / w, i % w);
            if let Some((idx, c)) = m {
                atom_index[(y, x)] = idx as i64;
                correlation[(y, x)] = c;
                let p = self.params[idx].to_array();
                for (k, v) in p.into_iter().enumerate() {
                    maps.data[(k, y, x)] = v;
                }
            }
        }
        Ok(MatchResult { maps, atom_index, correlation })
    }
}

/// Match every voxel of `img` against the full dictionary.
pub fn match_image(
    img: &MrfImage,
    dict: &Dictionary,
    mask: Option<&Array2<bool>>,
) -> Result<MatchResult> {
    Matcher::new(dict)?.match_image(img, mask)
}

/// Fraction of voxels with identical atom index in two match results.
pub fn index_agreement(a: &Array2<i64>, b: &Array2<i64>) -> f64 {
    let same = a.iter().zip(b.iter()).filter(|(x, y)| x == y).count();
    same as f64 / a.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{build_dictionary, DictionaryOptions, SequenceTrain};

    fn small_dict() -> Dictionary {
        let grid = ParameterGrid::new([
            vec![0.0, 0.3, 0.6, 1.0],
            vec![700.0, 1000.0, 1300.0],
            vec![250.0, 350.0],
            vec![-40.0, 0.0, 40.0],
            vec![0.7, 1.0],
        ])
        .unwrap();
        build_dictionary(&SequenceTrain::default_train(24), &grid, DictionaryOptions::default())
            .unwrap()
    }

    #[test]
    fn exact_atom_matches_itself_at_any_scale() {
        let dict = small_dict();
        // ff = 0.3 atoms have no duplicates
        for k in [72usize, 80, 100] {
            let fp: Vec<Complex64> =
                dict.atoms.row(k).iter().map(|c| c * Complex64::new(3.5, -1.25)).collect();
            let (idx, corr) = match_voxel(&fp, &dict).unwrap().unwrap();
            assert_eq!(idx, k);
            assert!((corr - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_fingerprint_is_background() {
        let dict = small_dict();
        let fp = vec![Complex64::new(0.0, 0.0); dict.frames()];
        assert_eq!(match_voxel(&fp, &dict).unwrap(), None);
    }

    #[test]
    fn unnormalized_dictionary_is_rejected() {
        let grid = ParameterGrid::new([vec![0.1], vec![800.0], vec![300.0], vec![0.0], vec![1.0]])
            .unwrap();
        let dict = build_dictionary(
            &SequenceTrain::default_train(8),
            &grid,
            DictionaryOptions { normalize: false, ..Default::default() },
        )
        .unwrap();
        let fp = dict.atoms.row(0).to_vec();
        assert!(match_voxel(&fp, &dict).is_err());
    }

    #[test]
    fn duplicate_atoms_resolve_to_lowest_index() {
        let dict = small_dict();
        // with ff = 0 the fat T1 has no effect on the signal
        let k_dup = dict
            .params
            .iter()
            .position(|p| p.ff == 0.0 && p.t1_fat == 350.0)
            .unwrap();
        let k_low = dict
            .params
            .iter()
            .position(|p| {
                p.ff == 0.0
                    && p.t1_fat == 250.0
                    && p.t1_h2o == dict.params[k_dup].t1_h2o
                    && p.delta_f == dict.params[k_dup].delta_f
                    && p.b1 == dict.params[k_dup].b1
            })
            .unwrap();
        let fp = dict.atoms.row(k_dup).to_vec();
        assert_eq!(match_voxel(&fp, &dict).unwrap().unwrap().0, k_low);
        let m = Matcher::new(&dict).unwrap();
        assert_eq!(m.match_many(&[fp])[0].unwrap().0, k_low);
    }

    #[test]
    fn gemm_path_agrees_with_brute_force() {
        let dict = small_dict();
        let m = Matcher::new(&dict).unwrap();
        let fps: Vec<Vec<Complex64>> = (0..dict.len())
            .step_by(7)
            .map(|k| {
                dict.atoms
                    .row(k)
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c + Complex64::new(0.01 * (i as f64).sin(), 0.005))
                    .collect()
            })
            .collect();
        let fast = m.match_many(&fps);
        for (fp, f) in fps.iter().zip(fast) {
            let slow = match_voxel(fp, &dict).unwrap().unwrap();
            let f = f.unwrap();
            assert_eq!(f.0, slow.0);
            assert!((f.1 - slow.1).abs() < 1e-12);
        }
    }

    #[test]
    fn image_shape_errors() {
        let dict = small_dict();
        let img = MrfImage::zeros(4, 4, dict.frames() + 1);
        assert!(match_image(&img, &dict, None).is_err());
        let img = MrfImage::zeros(4, 4, dict.frames());
        let mask = Array2::from_elem((3, 4), true);
        assert!(match_image(&img, &dict, Some(&mask)).is_err());
    }

    #[test]
    fn all_zero_image_is_background() {
        let dict = small_dict();
        let img = MrfImage::zeros(3, 5, dict.frames());
        let r = match_image(&img, &dict, None).unwrap();
        assert!(r.atom_index.iter().all(|&i| i == BACKGROUND));
        assert!(r.correlation.iter().all(|c| c.is_nan()));
        assert!(r.maps.map(MapKind::Ff).iter().all(|&v| v == 0.0));
        assert!(r.maps.map(MapKind::T1H2o).iter().all(|&v| v == 700.0));
        assert!(r.maps.map(MapKind::DeltaF).iter().all(|&v| v == -40.0));
    }

    #[test]
    fn single_voxel_equal_to_atom_zero() {
        let dict = small_dict();
        let mut img = MrfImage::zeros(1, 1, dict.frames());
        img.data.slice_mut(s![0, 0, ..]).assign(&dict.atoms.row(0));
        let r = match_image(&img, &dict, None).unwrap();
        assert_eq!(r.atom_index[(0, 0)], 0);
        let p = dict.params[0];
        for k in MapKind::ALL {
            assert_eq!(r.maps.map(k)[(0, 0)], p.get(k));
        }
    }

    #[test]
    fn masked_voxels_stay_background() {
        let dict = small_dict();
        let mut img = MrfImage::zeros(2, 2, dict.frames());
        for y in 0..2 {
            for x in 0..2 {
                img.data.slice_mut(s![y, x, ..]).assign(&dict.atoms.row(100));
            }
        }
        let mut mask = Array2::from_elem((2, 2), true);
        mask[(1, 0)] = false;
        let r = match_image(&img, &dict, Some(&mask)).unwrap();
        assert_eq!(r.atom_index[(1, 0)], BACKGROUND);
        assert_eq!(r.atom_index[(0, 0)], 100);
    }

    #[test]
    fn compression_rank_bounds() {
        let dict = small_dict();
        assert!(compress_dictionary(&dict, 0).is_err());
        assert!(compress_dictionary(&dict, dict.frames() + 1).is_err());
        let (c, p) = compress_dictionary(&dict, 5).unwrap();
        assert_eq!(c.atoms.dim(), (dict.len(), 5));
        assert_eq!(p.rank(), 5);
        let sv = &c.singular_values;
        assert!(sv.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn full_rank_compression_is_lossless() {
        let dict = small_dict();
        let (c, p) = compress_dictionary(&dict, dict.frames()).unwrap();
        let full = Matcher::new(&dict).unwrap();
        let comp = Matcher::compressed(&c, &p);
        let fps: Vec<Vec<Complex64>> =
            (0..dict.len()).map(|k| dict.atoms.row(k).to_vec()).collect();
        let a: Vec<_> = full.match_many(&fps).into_iter().map(|m| m.unwrap().0).collect();
        let b: Vec<_> = comp.match_many(&fps).into_iter().map(|m| m.unwrap().0).collect();
        assert_eq!(a, b);
    }
}
