//! Dense per-pixel fields and the DTEN binary tensor format.
//!
//! DTEN layout, all integers little-endian:
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 4            | magic `b"DTEN"`                           |
//! | 1            | version, always 1                         |
//! | 1            | dtype: 0 = f32, 1 = u8, 2 = u32           |
//! | 2            | ndim (u16)                                |
//! | 4 * ndim     | dims (u32 each), outermost first          |
//! | elem * prod  | row-major payload                         |
//!
//! Probability maps are `[H, W]` f32, offset maps `[H, W, 4]` f32
//! (channel-last), label maps `[H, W]` u32 and validity masks `[H, W]` u8.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::BoxOffsets;

pub const MAGIC: &[u8; 4] = b"DTEN";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported DTEN version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("expected shape {expected}, found {found:?}")]
    WrongShape { expected: &'static str, found: Vec<usize> },
    #[error("expected dtype {expected:?}, found {found:?}")]
    WrongDtype { expected: DType, found: DType },
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error("value {value} at element {index} outside {range}")]
    OutOfRange { index: usize, value: f64, range: &'static str },
    #[error("instance ids are not contiguous: id {missing} missing below max {max}")]
    NonContiguousLabels { missing: u32, max: u32 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
    U32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
            DType::U32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, MapError> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::U8),
            2 => Ok(DType::U32),
            other => Err(MapError::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
            TensorData::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Untyped DTEN contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn read_tensor<R: Read>(mut reader: R) -> Result<Tensor, MapError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    parse_tensor(&bytes)
}

pub fn parse_tensor(bytes: &[u8]) -> Result<Tensor, MapError> {
    if bytes.len() < 4 {
        return Err(MapError::TruncatedHeader);
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(MapError::BadMagic(magic));
    }
    if bytes.len() < 8 {
        return Err(MapError::TruncatedHeader);
    }
    if bytes[4] != VERSION {
        return Err(MapError::UnsupportedVersion(bytes[4]));
    }
    let dtype = DType::from_code(bytes[5])?;
    let ndim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let header_len = 8 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(MapError::TruncatedHeader);
    }
    let dims: Vec<usize> = bytes[8..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let payload = &bytes[header_len..];
    let expected = element_count(&dims)
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| MapError::DimensionMismatch(format!("dims {dims:?} overflow")))?;
    if payload.len() != expected {
        return Err(MapError::LengthMismatch { expected, actual: payload.len() });
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        DType::U8 => TensorData::U8(payload.to_vec()),
        DType::U32 => TensorData::U32(
            payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
    };
    Ok(Tensor { dims, data })
}

pub fn write_tensor<W: Write>(tensor: &Tensor, mut writer: W) -> Result<(), MapError> {
    writer.write_all(&encode_tensor(tensor)?)?;
    writer.flush()?;
    Ok(())
}

pub fn encode_tensor(tensor: &Tensor) -> Result<Vec<u8>, MapError> {
    let n = element_count(&tensor.dims)
        .ok_or_else(|| MapError::DimensionMismatch(format!("dims {:?} overflow", tensor.dims)))?;
    if n != tensor.data.len() {
        return Err(MapError::DimensionMismatch(format!(
            "dims {:?} imply {n} elements, data has {}",
            tensor.dims,
            tensor.data.len()
        )));
    }
    let ndim = u16::try_from(tensor.dims.len())
        .map_err(|_| MapError::DimensionMismatch("too many dimensions".into()))?;
    let dtype = tensor.data.dtype();
    let mut out = Vec::with_capacity(8 + 4 * tensor.dims.len() + n * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.extend_from_slice(&ndim.to_le_bytes());
    for &d in &tensor.dims {
        let d = u32::try_from(d)
            .map_err(|_| MapError::DimensionMismatch(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &tensor.data {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => out.extend_from_slice(v),
        TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

/// A typed map with a fixed DTEN shape and dtype.
pub trait DtenMap: Sized {
    fn to_tensor(&self) -> Tensor;
    fn from_tensor(tensor: Tensor) -> Result<Self, MapError>;

    fn read_from<R: Read>(reader: R) -> Result<Self, MapError> {
        Self::from_tensor(read_tensor(reader)?)
    }

    fn write_to<W: Write>(&self, writer: W) -> Result<(), MapError> {
        write_tensor(&self.to_tensor(), writer)
    }

    fn load(path: &Path) -> Result<Self, MapError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    fn save(&self, path: &Path) -> Result<(), MapError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }
}

fn expect_dtype(found: &TensorData, expected: DType) -> Result<(), MapError> {
    if found.dtype() != expected {
        return Err(MapError::WrongDtype { expected, found: found.dtype() });
    }
    Ok(())
}

fn expect_hw(dims: &[usize]) -> Result<(usize, usize), MapError> {
    match dims {
        [h, w] => Ok((*h, *w)),
        _ => Err(MapError::WrongShape { expected: "[H, W]", found: dims.to_vec() }),
    }
}

fn check_len(len: usize, expected: usize) -> Result<(), MapError> {
    if len != expected {
        return Err(MapError::DimensionMismatch(format!("expected {expected} values, got {len}")));
    }
    Ok(())
}

/// Per-pixel foreground probability, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, MapError> {
        check_len(data.len(), height * width)?;
        for (index, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(MapError::NonFinite { index });
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(MapError::OutOfRange { index, value: v as f64, range: "[0, 1]" });
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }
}

impl DtenMap for ProbMap {
    fn to_tensor(&self) -> Tensor {
        Tensor { dims: vec![self.height, self.width], data: TensorData::F32(self.data.clone()) }
    }

    fn from_tensor(tensor: Tensor) -> Result<Self, MapError> {
        expect_dtype(&tensor.data, DType::F32)?;
        let (h, w) = expect_hw(&tensor.dims)?;
        let TensorData::F32(data) = tensor.data else { unreachable!() };
        Self::new(h, w, data)
    }
}

/// Per-pixel `(dx, dy, dw, dh)` offsets, row-major and channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl OffsetMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, MapError> {
        check_len(data.len(), height * width * 4)?;
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(MapError::NonFinite { index });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 4] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> BoxOffsets {
        let i = (row * self.width + col) * 4;
        let d = &self.data[i..i + 4];
        BoxOffsets { dx: d[0] as f64, dy: d[1] as f64, dw: d[2] as f64, dh: d[3] as f64 }
    }

    /// Stores `off` rounded to f32. Non-finite values are rejected.
    pub fn set(&mut self, row: usize, col: usize, off: &BoxOffsets) -> Result<(), MapError> {
        let i = (row * self.width + col) * 4;
        let vals = off.to_array().map(|v| v as f32);
        if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
            return Err(MapError::NonFinite { index: i + k });
        }
        self.data[i..i + 4].copy_from_slice(&vals);
        Ok(())
    }
}

impl DtenMap for OffsetMap {
    fn to_tensor(&self) -> Tensor {
        Tensor { dims: vec![self.height, self.width, 4], data: TensorData::F32(self.data.clone()) }
    }

    fn from_tensor(tensor: Tensor) -> Result<Self, MapError> {
        expect_dtype(&tensor.data, DType::F32)?;
        let (h, w) = match tensor.dims[..] {
            [h, w, 4] => (h, w),
            _ => return Err(MapError::WrongShape { expected: "[H, W, 4]", found: tensor.dims }),
        };
        let TensorData::F32(data) = tensor.data else { unreachable!() };
        Self::new(h, w, data)
    }
}

/// Instance id per pixel, 0 for background. Ids are contiguous `1..=M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabelMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl InstanceLabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self, MapError> {
        check_len(data.len(), height * width)?;
        let max = data.iter().copied().max().unwrap_or(0);
        if max > 0 {
            let mut seen = vec![false; max as usize + 1];
            for &v in &data {
                seen[v as usize] = true;
            }
            if let Some(missing) = (1..=max).find(|&k| !seen[k as usize]) {
                return Err(MapError::NonContiguousLabels { missing, max });
            }
        }
        Ok(Self { height, width, data })
    }

    /// Caller guarantees contiguity.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<u32>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.width + col]
    }

    pub fn num_instances(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Mask of pixels carrying `id`.
    pub fn instance_mask(&self, id: u32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v == id).collect(),
        }
    }
}

impl DtenMap for InstanceLabelMap {
    fn to_tensor(&self) -> Tensor {
        Tensor { dims: vec![self.height, self.width], data: TensorData::U32(self.data.clone()) }
    }

    fn from_tensor(tensor: Tensor) -> Result<Self, MapError> {
        expect_dtype(&tensor.data, DType::U32)?;
        let (h, w) = expect_hw(&tensor.dims)?;
        let TensorData::U32(data) = tensor.data else { unreachable!() };
        Self::new(h, w, data)
    }
}

/// Row-major boolean field. Serialized as u8 0/1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

/// Where the offset loss is applied.
pub type ValidityMask = BinaryMask;

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self, MapError> {
        check_len(data.len(), height * width)?;
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Inclusive `(col_min, row_min, col_max, row_max)` of set pixels.
    pub fn pixel_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, &b)| b) {
            let (r, c) = (i / self.width, i % self.width);
            bounds = Some(match bounds {
                None => (c, r, c, r),
                Some((c0, r0, c1, r1)) => (c0.min(c), r0.min(r), c1.max(c), r1.max(r)),
            });
        }
        bounds
    }
}

impl DtenMap for BinaryMask {
    fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.height, self.width],
            data: TensorData::U8(self.data.iter().map(|&b| b as u8).collect()),
        }
    }

    fn from_tensor(tensor: Tensor) -> Result<Self, MapError> {
        expect_dtype(&tensor.data, DType::U8)?;
        let (h, w) = expect_hw(&tensor.dims)?;
        let TensorData::U8(raw) = tensor.data else { unreachable!() };
        let mut data = Vec::with_capacity(raw.len());
        for (index, v) in raw.into_iter().enumerate() {
            match v {
                0 => data.push(false),
                1 => data.push(true),
                _ => return Err(MapError::OutOfRange { index, value: v as f64, range: "{0, 1}" }),
            }
        }
        Self::new(h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bytes_of<M: DtenMap>(m: &M) -> Vec<u8> {
        let mut out = Vec::new();
        m.write_to(&mut out).unwrap();
        out
    }

    #[test]
    fn single_pixel_prob_map_layout() {
        let m = ProbMap::new(1, 1, vec![0.5]).unwrap();
        let bytes = bytes_of(&m);
        // 8 fixed header bytes + two u32 dims + one f32.
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..8], b"DTEN\x01\x00\x02\x00");
        assert_eq!(&bytes[8..16], &[1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[16..], &0.5f32.to_le_bytes());
        assert_eq!(ProbMap::read_from(&bytes[..]).unwrap(), m);
    }

    #[test]
    fn distinct_errors() {
        let good = bytes_of(&ProbMap::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap());

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(ProbMap::read_from(&bad[..]), Err(MapError::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(ProbMap::read_from(&bad[..]), Err(MapError::UnsupportedVersion(2))));

        let mut bad = good.clone();
        bad[5] = 9;
        assert!(matches!(ProbMap::read_from(&bad[..]), Err(MapError::UnsupportedDtype(9))));

        let truncated = &good[..good.len() - 1];
        assert!(matches!(
            ProbMap::read_from(truncated),
            Err(MapError::LengthMismatch { expected: 16, actual: 15 })
        ));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(ProbMap::read_from(&long[..]), Err(MapError::LengthMismatch { .. })));

        assert!(matches!(ProbMap::read_from(&good[..6]), Err(MapError::TruncatedHeader)));

        let nan = Tensor { dims: vec![1, 2], data: TensorData::F32(vec![0.5, f32::NAN]) };
        assert!(matches!(ProbMap::from_tensor(nan), Err(MapError::NonFinite { index: 1 })));

        let high = Tensor { dims: vec![1, 2], data: TensorData::F32(vec![0.5, 1.5]) };
        assert!(matches!(ProbMap::from_tensor(high), Err(MapError::OutOfRange { index: 1, .. })));

        let u8s = Tensor { dims: vec![1, 1], data: TensorData::U8(vec![1]) };
        assert!(matches!(ProbMap::from_tensor(u8s), Err(MapError::WrongDtype { .. })));

        let off_2d = Tensor { dims: vec![2, 2], data: TensorData::F32(vec![0.0; 4]) };
        assert!(matches!(OffsetMap::from_tensor(off_2d), Err(MapError::WrongShape { .. })));

        let off_inf = Tensor { dims: vec![1, 1, 4], data: TensorData::F32(vec![0.0, f32::INFINITY, 0.0, 0.0]) };
        assert!(matches!(OffsetMap::from_tensor(off_inf), Err(MapError::NonFinite { index: 1 })));

        let mask = Tensor { dims: vec![1, 2], data: TensorData::U8(vec![1, 2]) };
        assert!(matches!(BinaryMask::from_tensor(mask), Err(MapError::OutOfRange { .. })));

        let labels = Tensor { dims: vec![1, 3], data: TensorData::U32(vec![0, 1, 3]) };
        assert!(matches!(
            InstanceLabelMap::from_tensor(labels),
            Err(MapError::NonContiguousLabels { missing: 2, max: 3 })
        ));
    }

    #[test]
    fn offsets_channel_last() {
        let mut m = OffsetMap::zeros(2, 3);
        m.set(1, 2, &BoxOffsets { dx: 1.0, dy: 2.0, dw: 3.0, dh: 4.0 }).unwrap();
        assert_eq!(&m.data()[20..24], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.get(1, 2).to_array(), [1.0, 2.0, 3.0, 4.0]);
        let back = OffsetMap::read_from(&bytes_of(&m)[..]).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn pixel_bounds() {
        let m = BinaryMask::from_fn(5, 6, |r, c| (1..=3).contains(&r) && (2..=4).contains(&c));
        assert_eq!(m.pixel_bounds(), Some((2, 1, 4, 3)));
        assert_eq!(BinaryMask::empty(3, 3).pixel_bounds(), None);
    }

    proptest! {
        #[test]
        fn prob_round_trip_bit_exact(h in 0usize..8, w in 0usize..8, seed in any::<u64>()) {
            let data: Vec<f32> = (0..h * w)
                .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 40) as f32) / (1u64 << 24) as f32)
                .collect();
            let m = ProbMap::new(h, w, data).unwrap();
            let bytes = bytes_of(&m);
            let back = ProbMap::read_from(&bytes[..]).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(bytes_of(&back), bytes);
        }

        #[test]
        fn offsets_round_trip_bit_exact(h in 0usize..6, w in 0usize..6, vals in proptest::collection::vec(-1e6f32..1e6, 0..144)) {
            let n = h * w * 4;
            let data: Vec<f32> = (0..n).map(|i| vals.get(i).copied().unwrap_or(i as f32 * -0.37)).collect();
            let m = OffsetMap::new(h, w, data).unwrap();
            let bytes = bytes_of(&m);
            let back = OffsetMap::read_from(&bytes[..]).unwrap();
            prop_assert!(back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(bytes_of(&back), bytes);
        }

        #[test]
        fn labels_and_masks_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..64)) {
            let w = bits.len();
            let mask = BinaryMask::new(1, w, bits.clone()).unwrap();
            prop_assert_eq!(BinaryMask::read_from(&bytes_of(&mask)[..]).unwrap(), mask);
            let labels: Vec<u32> = bits.iter().map(|&b| b as u32).collect();
            let lm = InstanceLabelMap::new(1, w, labels).unwrap();
            prop_assert_eq!(InstanceLabelMap::read_from(&bytes_of(&lm)[..]).unwrap(), lm);
        }
    }
}
