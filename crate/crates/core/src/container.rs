//! On-disk tensor container.
//!
//! Layout: the 8 magic bytes `FPFTENS1`, the header length as a little-endian
//! `u64`, the UTF-8 JSON header, then the raw little-endian payload in
//! row-major order. Complex values are stored as interleaved (re, im) pairs.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use num_complex::{Complex32, Complex64};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FPFTENS1";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    /// complex, two `f32`
    C64,
    /// complex, two `f64`
    C128,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::C64 => 8,
            DType::C128 => 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    pub shape: Vec<usize>,
    pub dtype: DType,
    #[serde(default)]
    pub axes: Vec<String>,
    #[serde(default)]
    pub units: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub payload_sha256: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    C64(Vec<Complex32>),
    C128(Vec<Complex64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::C64(_) => DType::C64,
            TensorData::C128(_) => DType::C128,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::C64(v) => v.len(),
            TensorData::C128(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * self.dtype().size());
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            TensorData::C64(v) => v.iter().for_each(|x| {
                out.extend(x.re.to_le_bytes());
                out.extend(x.im.to_le_bytes());
            }),
            TensorData::C128(v) => v.iter().for_each(|x| {
                out.extend(x.re.to_le_bytes());
                out.extend(x.im.to_le_bytes());
            }),
        }
        out
    }

    fn from_le_bytes(dtype: DType, bytes: &[u8]) -> Self {
        fn f32s(b: &[u8]) -> impl Iterator<Item = f32> + '_ {
            b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        }
        fn f64s(b: &[u8]) -> impl Iterator<Item = f64> + '_ {
            b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        }
        match dtype {
            DType::F32 => TensorData::F32(f32s(bytes).collect()),
            DType::F64 => TensorData::F64(f64s(bytes).collect()),
            DType::C64 => {
                let v: Vec<f32> = f32s(bytes).collect();
                TensorData::C64(v.chunks_exact(2).map(|p| Complex32::new(p[0], p[1])).collect())
            }
            DType::C128 => {
                let v: Vec<f64> = f64s(bytes).collect();
                TensorData::C128(v.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect())
            }
        }
    }
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON serialization of a config value.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config)?;
    Ok(sha256_hex(&serde_json::to_vec(&value)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub header: Header,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: &[usize], data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{n} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        let header = Header {
            schema_version: SCHEMA_VERSION,
            shape: shape.to_vec(),
            dtype: data.dtype(),
            axes: Vec::new(),
            units: Vec::new(),
            seed: None,
            config_hash: None,
            payload_sha256: String::new(),
            meta: serde_json::Value::Null,
        };
        Ok(Tensor { header, data })
    }

    pub fn from_f64(array: &ArrayD<f64>) -> Self {
        let data = array.as_standard_layout().iter().copied().collect();
        Tensor::new(array.shape(), TensorData::F64(data)).expect("shape matches")
    }

    pub fn from_f32(array: &ArrayD<f32>) -> Self {
        let data = array.as_standard_layout().iter().copied().collect();
        Tensor::new(array.shape(), TensorData::F32(data)).expect("shape matches")
    }

    pub fn from_complex(array: &ArrayD<Complex64>) -> Self {
        let data = array.as_standard_layout().iter().copied().collect();
        Tensor::new(array.shape(), TensorData::C128(data)).expect("shape matches")
    }

    pub fn with_axes(mut self, axes: &[&str]) -> Self {
        self.header.axes = axes.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_units(mut self, units: &[&str]) -> Self {
        self.header.units = units.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_provenance(mut self, seed: Option<u64>, config_hash: Option<String>) -> Self {
        self.header.seed = seed;
        self.header.config_hash = config_hash;
        self
    }

    pub fn with_meta(mut self, meta: serde_json::Value) -> Self {
        self.header.meta = meta;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.header.shape
    }

    /// Real data widened to `f64`.
    pub fn to_f64(&self) -> Result<ArrayD<f64>> {
        let v: Vec<f64> = match &self.data {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            _ => return Err(Error::Format(format!("expected real data, found {:?}", self.data.dtype()))),
        };
        Ok(ArrayD::from_shape_vec(IxDyn(self.shape()), v).expect("validated shape"))
    }

    pub fn to_f32(&self) -> Result<ArrayD<f32>> {
        match &self.data {
            TensorData::F32(v) => Ok(ArrayD::from_shape_vec(IxDyn(self.shape()), v.clone()).expect("validated shape")),
            _ => Err(Error::Format(format!("expected f32 data, found {:?}", self.data.dtype()))),
        }
    }

    /// Complex data widened to `Complex64`.
    pub fn to_complex(&self) -> Result<ArrayD<Complex64>> {
        let v: Vec<Complex64> = match &self.data {
            TensorData::C128(v) => v.clone(),
            TensorData::C64(v) => v.iter().map(|c| Complex64::new(c.re as f64, c.im as f64)).collect(),
            _ => return Err(Error::Format(format!("expected complex data, found {:?}", self.data.dtype()))),
        };
        Ok(ArrayD::from_shape_vec(IxDyn(self.shape()), v).expect("validated shape"))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = self.data.to_le_bytes();
        let mut header = self.header.clone();
        header.dtype = self.data.dtype();
        header.payload_sha256 = sha256_hex(&payload);
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        out.extend(payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing container magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported schema version {}", header.schema_version)));
        }
        let payload = &body[hlen..];
        let n: usize = header.shape.iter().product();
        if payload.len() != n * header.dtype.size() {
            return Err(Error::Format(format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                n * header.dtype.size()
            )));
        }
        if sha256_hex(payload) != header.payload_sha256 {
            return Err(Error::Format("payload checksum mismatch".into()));
        }
        let data = TensorData::from_le_bytes(header.dtype, payload);
        Ok(Tensor { header, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Tensor::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roundtrip(t: &Tensor) -> Tensor {
        Tensor::from_bytes(&t.to_bytes().unwrap()).unwrap()
    }

    fn bits(d: &TensorData) -> Vec<u64> {
        match d {
            TensorData::F32(v) => v.iter().map(|x| x.to_bits() as u64).collect(),
            TensorData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
            TensorData::C64(v) => v.iter().flat_map(|c| [c.re.to_bits() as u64, c.im.to_bits() as u64]).collect(),
            TensorData::C128(v) => v.iter().flat_map(|c| [c.re.to_bits(), c.im.to_bits()]).collect(),
        }
    }

    proptest! {
        #[test]
        fn f64_roundtrip_is_bit_exact(raw in prop::collection::vec(any::<u64>(), 0..64)) {
            let v: Vec<f64> = raw.iter().map(|&b| f64::from_bits(b)).collect();
            let t = Tensor::new(&[v.len()], TensorData::F64(v)).unwrap();
            prop_assert_eq!(bits(&roundtrip(&t).data), bits(&t.data));
        }

        #[test]
        fn f32_roundtrip_is_bit_exact(raw in prop::collection::vec(any::<u32>(), 0..64)) {
            let v: Vec<f32> = raw.iter().map(|&b| f32::from_bits(b)).collect();
            let t = Tensor::new(&[1, v.len()], TensorData::F32(v)).unwrap();
            prop_assert_eq!(bits(&roundtrip(&t).data), bits(&t.data));
        }

        #[test]
        fn complex_roundtrip_is_bit_exact(raw in prop::collection::vec(any::<(u64, u64)>(), 0..32)) {
            let v: Vec<Complex64> = raw.iter().map(|&(a, b)| Complex64::new(f64::from_bits(a), f64::from_bits(b))).collect();
            let v32: Vec<Complex32> = raw.iter().map(|&(a, b)| Complex32::new(f32::from_bits(a as u32), f32::from_bits(b as u32))).collect();
            let t = Tensor::new(&[v.len()], TensorData::C128(v)).unwrap();
            prop_assert_eq!(bits(&roundtrip(&t).data), bits(&t.data));
            let t = Tensor::new(&[v32.len()], TensorData::C64(v32)).unwrap();
            prop_assert_eq!(bits(&roundtrip(&t).data), bits(&t.data));
        }
    }

    #[test]
    fn header_fields_survive() {
        let a = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |i| (i[0] * 12 + i[1] * 4 + i[2]) as f64);
        let t = Tensor::from_f64(&a)
            .with_axes(&["map", "y", "x"])
            .with_units(&["", "ms", "Hz"])
            .with_provenance(Some(7), Some("abc".into()))
            .with_meta(serde_json::json!({"kind": "maps"}));
        let r = roundtrip(&t);
        assert_eq!(r.header.axes, vec!["map", "y", "x"]);
        assert_eq!(r.header.seed, Some(7));
        assert_eq!(r.header.meta["kind"], "maps");
        assert_eq!(r.to_f64().unwrap(), a);
        assert_eq!(r.header.payload_sha256.len(), 64);
    }

    #[test]
    fn payload_length_is_shape_times_element_size() {
        let t = Tensor::new(&[3, 5], TensorData::C128(vec![Complex64::new(1.0, 2.0); 15])).unwrap();
        let bytes = t.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 16 - hlen, 15 * 16);
    }

    #[test]
    fn corruption_is_detected() {
        let t = Tensor::new(&[4], TensorData::F64(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let mut bytes = t.to_bytes().unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::Format(_))));
        let good = t.to_bytes().unwrap();
        assert!(Tensor::from_bytes(&good[..good.len() - 8]).is_err());
        assert!(Tensor::from_bytes(b"NOTATENSOR000000").is_err());
        assert!(Tensor::new(&[5], TensorData::F64(vec![0.0; 4])).is_err());
    }

    #[test]
    fn dtype_conversions() {
        let t = Tensor::new(&[2], TensorData::F64(vec![1.0, 2.0])).unwrap();
        assert!(t.to_complex().is_err());
        assert!(t.to_f32().is_err());
        let c = Tensor::new(&[1], TensorData::C64(vec![Complex32::new(0.5, -1.0)])).unwrap();
        assert_eq!(c.to_complex().unwrap()[[0]], Complex64::new(0.5, -1.0));
        assert!(c.to_f64().is_err());
    }

    #[test]
    fn config_hash_is_stable() {
        let a = config_hash(&serde_json::json!({"b": 1, "a": [1.5, 2]})).unwrap();
        let b = config_hash(&serde_json::json!({"a": [1.5, 2], "b": 1})).unwrap();
        assert_eq!(a, b);
    }
}
