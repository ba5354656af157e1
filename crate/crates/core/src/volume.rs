//! Dense 3D grids and the `VOL1` container.
//!
//! Layout on disk (all little-endian):
//!
//! ```text
//! "VOL1" | dtype:u32 | z:u32 | y:u32 | x:u32 | sz:f32 | sy:f32 | sx:f32 | payload
//! ```
//!
//! `dtype` is 0 for float32, 1 for uint16 and 2 for uint8. The payload is
//! z-major, then y, then x.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VOL1";
pub const HEADER_LEN: usize = 4 + 16 + 12;

/// Grid extent as `[z, y, x]`.
pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    U16,
    U8,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::U16 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::U16),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U16 => 2,
            DType::U8 => 1,
        }
    }
}

/// Scalar kinds a volume may hold in memory.
pub trait Element: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Element for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl Element for u16 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v.round().clamp(0.0, u16::MAX as f64) as u16
    }
}

impl Element for u8 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v.round().clamp(0.0, u8::MAX as f64) as u8
    }
}

/// Element kinds that have an on-disk representation.
pub trait StoredElement: Element {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl StoredElement for f32 {
    const DTYPE: DType = DType::F32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl StoredElement for u16 {
    const DTYPE: DType = DType::U16;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        u16::from_le_bytes([bytes[0], bytes[1]])
    }
}

impl StoredElement for u8 {
    const DTYPE: DType = DType::U8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

/// Dense `(z, y, x)` grid with physical voxel spacing in micrometres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<T>,
}

/// Binary masks and instance label maps share the uint16 carrier.
pub type LabelMap = Volume<u16>;

impl<T: Element> Volume<T> {
    pub fn new(dims: Dims, spacing: [f32; 3], data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Argument(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::Argument(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    /// Unit-spaced volume filled with `T::default()`.
    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, T::default())
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "dims must be positive");
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![value; voxel_count(dims)],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self {
            dims,
            spacing: [1.0; 3],
            data,
        }
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        assert!(spacing.iter().all(|&s| s > 0.0), "spacing must be positive");
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn coord(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[2];
        let y = (idx / self.dims[2]) % self.dims[1];
        let z = idx / (self.dims[1] * self.dims[2]);
        [z, y, x]
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, value: T) {
        let i = self.index(z, y, x);
        self.data[i] = value;
    }

    pub fn contains(&self, point: [f64; 3]) -> bool {
        point
            .iter()
            .zip(self.dims.iter())
            .all(|(&p, &d)| p.is_finite() && p >= 0.0 && p <= (d - 1) as f64)
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Volume<f64> {
        self.map(Element::to_f64)
    }

    pub fn to_f32(&self) -> Volume<f32> {
        self.map(|v| v.to_f64() as f32)
    }

    /// Same geometry, new payload.
    pub fn with_data<U: Element>(&self, data: Vec<U>) -> Volume<U> {
        assert_eq!(data.len(), self.data.len(), "payload length mismatch");
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data,
        }
    }

    /// Swap two axes (0 = z, 1 = y, 2 = x).
    pub fn transpose(&self, a: usize, b: usize) -> Self {
        let mut dims = self.dims;
        dims.swap(a, b);
        let mut spacing = self.spacing;
        spacing.swap(a, b);
        let mut out = Volume::from_fn(dims, |z, y, x| {
            let mut c = [z, y, x];
            c.swap(a, b);
            self.get(c[0], c[1], c[2])
        });
        out.spacing = spacing;
        out
    }
}

impl<T: Element + PartialOrd> Volume<T> {
    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(self.data[0], |m, v| if v > m { v } else { m })
    }
}

impl LabelMap {
    /// Foreground (`label > 0`) as a 0/1 mask.
    pub fn foreground(&self) -> LabelMap {
        self.map(|v| u16::from(v > 0))
    }

    pub fn max_label(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

/// A volume read from disk whose element kind is only known at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    F32(Volume<f32>),
    U16(Volume<u16>),
    U8(Volume<u8>),
}

impl AnyVolume {
    pub fn dtype(&self) -> DType {
        match self {
            AnyVolume::F32(_) => DType::F32,
            AnyVolume::U16(_) => DType::U16,
            AnyVolume::U8(_) => DType::U8,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            AnyVolume::F32(v) => v.dims(),
            AnyVolume::U16(v) => v.dims(),
            AnyVolume::U8(v) => v.dims(),
        }
    }

    pub fn spacing(&self) -> [f32; 3] {
        match self {
            AnyVolume::F32(v) => v.spacing(),
            AnyVolume::U16(v) => v.spacing(),
            AnyVolume::U8(v) => v.spacing(),
        }
    }

    /// Converts to float, regardless of the stored kind.
    pub fn into_f32(self) -> Volume<f32> {
        match self {
            AnyVolume::F32(v) => v,
            AnyVolume::U16(v) => v.to_f32(),
            AnyVolume::U8(v) => v.to_f32(),
        }
    }

    /// Converts integer kinds to labels; float volumes are rounded.
    pub fn into_labels(self) -> LabelMap {
        match self {
            AnyVolume::F32(v) => v.map(|x| u16::from_f64(x as f64)),
            AnyVolume::U16(v) => v,
            AnyVolume::U8(v) => v.map(u16::from),
        }
    }
}

pub fn encode_volume<T: StoredElement>(v: &Volume<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + v.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&T::DTYPE.code().to_le_bytes());
    for d in v.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for &value in &v.data {
        value.write_le(&mut out);
    }
    out
}

pub fn write_volume<T: StoredElement>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(v)).map_err(|e| Error::storage(path, e))
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<AnyVolume> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "magic", "bad magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "header", "truncated header"));
    }
    let code = u32_at(bytes, 4);
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::format(path, "dtype", format!("unknown dtype code {code}")))?;
    let dims = [
        u32_at(bytes, 8) as usize,
        u32_at(bytes, 12) as usize,
        u32_at(bytes, 16) as usize,
    ];
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::format(path, "dims", format!("zero extent {dims:?}")));
    }
    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        *s = f32::from_le_bytes(bytes[20 + 4 * i..24 + 4 * i].try_into().unwrap());
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::format(
            path,
            "spacing",
            format!("non-positive spacing {spacing:?}"),
        ));
    }
    let n = voxel_count(dims);
    let payload = &bytes[HEADER_LEN..];
    let expected = n * dtype.size();
    if payload.len() < expected {
        return Err(Error::format(
            path,
            "payload",
            format!("truncated: {} of {expected} bytes", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            path,
            "payload",
            format!("{} trailing bytes", payload.len() - expected),
        ));
    }
    fn collect<T: StoredElement>(payload: &[u8], dims: Dims, spacing: [f32; 3]) -> Volume<T> {
        let data = payload
            .chunks_exact(T::DTYPE.size())
            .map(T::read_le)
            .collect();
        Volume {
            dims,
            spacing,
            data,
        }
    }
    Ok(match dtype {
        DType::F32 => AnyVolume::F32(collect(payload, dims, spacing)),
        DType::U16 => AnyVolume::U16(collect(payload, dims, spacing)),
        DType::U8 => AnyVolume::U8(collect(payload, dims, spacing)),
    })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_volume(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_voxel_file_is_36_bytes() {
        let v = Volume::<f32>::zeros([1, 1, 1]);
        let bytes = encode_volume(&v);
        assert_eq!(bytes.len(), 36);
        assert_eq!(&bytes[..4], b"VOL1");
    }

    #[test]
    fn header_fields_are_little_endian() {
        let v = Volume::<u16>::zeros([2, 3, 4]).with_spacing([2.0, 0.5, 0.5]);
        let bytes = encode_volume(&v);
        assert_eq!(u32_at(&bytes, 4), 1);
        assert_eq!(u32_at(&bytes, 8), 2);
        assert_eq!(u32_at(&bytes, 12), 3);
        assert_eq!(u32_at(&bytes, 16), 4);
        assert_eq!(&bytes[20..24], &2.0f32.to_le_bytes());
        assert_eq!(bytes.len(), HEADER_LEN + 2 * 24);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode_volume(&Volume::<u8>::zeros([1, 2, 2]));
        bytes[3] = b'0';
        let err = decode_volume(&bytes, Path::new("x.vol")).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = encode_volume(&Volume::<f32>::zeros([2, 2, 2]));
        bytes.truncate(bytes.len() - 1);
        let err = decode_volume(&bytes, Path::new("x.vol")).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let mut bytes = encode_volume(&Volume::<u8>::zeros([1, 1, 1]));
        bytes[4] = 9;
        let err = decode_volume(&bytes, Path::new("x.vol")).unwrap_err();
        assert!(matches!(err, Error::Format { field: "dtype", .. }), "{err}");
    }

    #[test]
    fn new_checks_length_and_spacing() {
        assert!(Volume::new([1, 2, 2], [1.0; 3], vec![0u8; 3]).is_err());
        assert!(Volume::new([1, 2, 2], [1.0, 0.0, 1.0], vec![0u8; 4]).is_err());
        assert!(Volume::new([1, 2, 2], [1.0; 3], vec![0u8; 4]).is_ok());
    }

    #[test]
    fn coord_inverts_index() {
        let v = Volume::<u8>::zeros([3, 4, 5]);
        for i in 0..v.len() {
            let [z, y, x] = v.coord(i);
            assert_eq!(v.index(z, y, x), i);
        }
    }
}
