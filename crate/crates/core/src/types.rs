//! Image-domain containers shared across the reconstruction pipeline.

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Complex temporal signal of a single voxel or dictionary atom.
pub type Fingerprint = Vec<Complex64>;

/// The five quantified parameters, in channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Ff,
    T1H2o,
    T1Fat,
    DeltaF,
    B1,
}

impl MapKind {
    pub const ALL: [MapKind; 5] = [
        MapKind::Ff,
        MapKind::T1H2o,
        MapKind::T1Fat,
        MapKind::DeltaF,
        MapKind::B1,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MapKind::Ff => "ff",
            MapKind::T1H2o => "t1_h2o",
            MapKind::T1Fat => "t1_fat",
            MapKind::DeltaF => "delta_f",
            MapKind::B1 => "b1",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            MapKind::Ff | MapKind::B1 => "fraction",
            MapKind::T1H2o | MapKind::T1Fat => "ms",
            MapKind::DeltaF => "Hz",
        }
    }

    pub fn from_name(name: &str) -> Option<MapKind> {
        MapKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

pub const N_MAPS: usize = 5;

/// H × W × T complex image-space time series. Stored as `(h, w, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MrfImage {
    pub data: Array3<Complex64>,
}

impl MrfImage {
    pub fn zeros(h: usize, w: usize, t: usize) -> Self {
        MrfImage { data: Array3::zeros((h, w, t)) }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn frames(&self) -> usize {
        self.data.dim().2
    }

    pub fn fingerprint(&self, y: usize, x: usize) -> Fingerprint {
        self.data.slice(ndarray::s![y, x, ..]).to_vec()
    }

    /// Voxels holding any non-zero sample.
    pub fn nonzero_mask(&self) -> Array2<bool> {
        self.data
            .map_axis(Axis(2), |fp| fp.iter().any(|c| c.re != 0.0 || c.im != 0.0))
    }
}

/// Real-valued parametric maps stored as `(map, h, w)` in [`MapKind`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricMaps {
    pub data: Array3<f64>,
}

impl ParametricMaps {
    pub fn zeros(h: usize, w: usize) -> Self {
        ParametricMaps { data: Array3::zeros((N_MAPS, h, w)) }
    }

    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        if data.dim().0 != N_MAPS {
            return Err(Error::DimensionMismatch {
                expected: format!("{N_MAPS} maps"),
                got: format!("{} maps", data.dim().0),
            });
        }
        Ok(ParametricMaps { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn map(&self, kind: MapKind) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), kind.index())
    }

    pub fn map_mut(&mut self, kind: MapKind) -> ArrayViewMut2<'_, f64> {
        self.data.index_axis_mut(Axis(0), kind.index())
    }
}
