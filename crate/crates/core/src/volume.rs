//! 3D scalar grids and their on-disk formats.
//!
//! Two formats are understood:
//!
//! * the raw-grid format (`.pseg`), read and written bit-exactly: a 64-byte
//!   little-endian header followed by an x-fastest payload;
//! * a read-only subset of single-file NIfTI-1 (`n+1`): unscaled, axis-aligned
//!   volumes of type uint8, int16 or float32.
//!
//! Intensities are held as `f32`, labels as `u16`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 8] = b"PSEG0001";
pub const RAW_HEADER_LEN: usize = 64;

/// Scalar codes of the raw-grid header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ScalarCode {
    F32 = 0,
    U16 = 1,
    U8 = 2,
    I16 = 3,
}

impl ScalarCode {
    fn from_u8(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ScalarCode::F32),
            1 => Ok(ScalarCode::U16),
            2 => Ok(ScalarCode::U8),
            3 => Ok(ScalarCode::I16),
            other => Err(Error::UnsupportedScalar(format!("raw-grid scalar code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            ScalarCode::F32 => 4,
            ScalarCode::U16 | ScalarCode::I16 => 2,
            ScalarCode::U8 => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Intensity,
    Label,
}

/// Voxel coordinate. Each component must be below the matching dimension of
/// the volume it indexes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelIndex {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl VoxelIndex {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        VoxelIndex { x, y, z }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    Intensity(Vec<f32>),
    Label { data: Vec<u16>, classes: u32 },
}

/// A 3D grid of intensities or integer labels, stored x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: VolumeData,
}

fn check_geometry(dims: [usize; 3], spacing: [f32; 3], len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::MalformedHeader(format!("dims {dims:?} must all be >= 1")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::MalformedHeader(format!(
            "spacing {spacing:?} must be positive and finite"
        )));
    }
    let expected = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| Error::MalformedHeader(format!("dims {dims:?} overflow")))?;
    if expected != len {
        return Err(Error::PayloadMismatch {
            expected,
            found: len,
        });
    }
    Ok(())
}

impl Volume3D {
    pub fn intensity(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        Ok(Volume3D {
            dims,
            spacing,
            data: VolumeData::Intensity(data),
        })
    }

    pub fn label(dims: [usize; 3], spacing: [f32; 3], data: Vec<u16>, classes: u32) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        if classes == 0 {
            return Err(Error::InvalidLabel("label volume needs a class count >= 1".into()));
        }
        if let Some(bad) = data.iter().find(|&&l| u32::from(l) >= classes) {
            return Err(Error::InvalidLabel(format!(
                "label {bad} outside [0, {}]",
                classes - 1
            )));
        }
        Ok(Volume3D {
            dims,
            spacing,
            data: VolumeData::Label { data, classes },
        })
    }

    pub fn zeros_like_label(&self, classes: u32) -> Self {
        Volume3D {
            dims: self.dims,
            spacing: self.spacing,
            data: VolumeData::Label {
                data: vec![0; self.len()],
                classes,
            },
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> VolumeKind {
        match self.data {
            VolumeData::Intensity(_) => VolumeKind::Intensity,
            VolumeData::Label { .. } => VolumeKind::Label,
        }
    }

    /// Declared class count; 0 for intensity volumes.
    pub fn classes(&self) -> u32 {
        match self.data {
            VolumeData::Intensity(_) => 0,
            VolumeData::Label { classes, .. } => classes,
        }
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    pub fn intensities(&self) -> Option<&[f32]> {
        match &self.data {
            VolumeData::Intensity(v) => Some(v),
            VolumeData::Label { .. } => None,
        }
    }

    pub fn labels(&self) -> Option<&[u16]> {
        match &self.data {
            VolumeData::Label { data, .. } => Some(data),
            VolumeData::Intensity(_) => None,
        }
    }

    pub(crate) fn labels_mut(&mut self) -> Option<&mut [u16]> {
        match &mut self.data {
            VolumeData::Label { data, .. } => Some(data),
            VolumeData::Intensity(_) => None,
        }
    }

    pub fn require_intensities(&self) -> Result<&[f32]> {
        self.intensities()
            .ok_or_else(|| Error::InvalidConfig("expected an intensity volume, got labels".into()))
    }

    pub fn require_labels(&self) -> Result<&[u16]> {
        self.labels()
            .ok_or_else(|| Error::InvalidConfig("expected a label volume, got intensities".into()))
    }

    /// Reinterprets an intensity volume as labels. Every value must be a
    /// non-negative integer below `classes`.
    pub fn into_label(self, classes: u32) -> Result<Self> {
        match self.data {
            VolumeData::Label { data, .. } => Volume3D::label(self.dims, self.spacing, data, classes),
            VolumeData::Intensity(values) => {
                let data = values
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 && v <= f32::from(u16::MAX) {
                            Ok(v as u16)
                        } else {
                            Err(Error::InvalidLabel(format!("value {v} is not a label")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Volume3D::label(self.dims, self.spacing, data, classes)
            }
        }
    }

    #[inline]
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Inverse of [`Volume3D::linear_index`].
    #[inline]
    pub fn voxel_of(&self, linear: usize) -> VoxelIndex {
        let x = linear % self.dims[0];
        let rest = linear / self.dims[0];
        VoxelIndex::new(x, rest % self.dims[1], rest / self.dims[1])
    }

    pub fn contains(&self, idx: VoxelIndex) -> bool {
        idx.x < self.dims[0] && idx.y < self.dims[1] && idx.z < self.dims[2]
    }

    pub fn voxel_at(&self, idx: VoxelIndex) -> Result<f32> {
        if !self.contains(idx) {
            return Err(Error::OutOfRange {
                x: idx.x,
                y: idx.y,
                z: idx.z,
                dims: self.dims,
            });
        }
        let i = self.linear_index(idx.x, idx.y, idx.z);
        Ok(match &self.data {
            VolumeData::Intensity(v) => v[i],
            VolumeData::Label { data, .. } => f32::from(data[i]),
        })
    }

    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims
    }

    pub fn check_same_grid(&self, other: &Volume3D, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimsMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Loads a raw-grid or NIfTI-1 file, detected by its leading bytes.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(RAW_MAGIC) {
        decode_raw(&bytes)
    } else if looks_like_nifti(&bytes) {
        decode_nifti(&bytes)
    } else {
        Err(Error::MalformedHeader(format!(
            "{}: neither a raw-grid nor a NIfTI-1 file",
            path.display()
        )))
    }
}

/// Writes the raw-grid format. Intensities are stored as f32, labels as u16.
pub fn save_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_raw(vol);
    File::create(path)
        .and_then(|f| {
            let mut w = BufWriter::new(f);
            w.write_all(&bytes)?;
            w.flush()
        })
        .map_err(|e| Error::io(path, e))
}

pub fn encode_raw(vol: &Volume3D) -> Vec<u8> {
    let (kind, code, width) = match vol.data {
        VolumeData::Intensity(_) => (0u8, ScalarCode::F32, 4),
        VolumeData::Label { .. } => (1u8, ScalarCode::U16, 2),
    };
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + vol.len() * width);
    out.extend_from_slice(RAW_MAGIC);
    out.push(kind);
    out.push(code as u8);
    out.extend_from_slice(&[0, 0]);
    for d in vol.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in vol.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&vol.classes().to_le_bytes());
    out.resize(RAW_HEADER_LEN, 0);
    match &vol.data {
        VolumeData::Intensity(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        VolumeData::Label { data, .. } => {
            data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
        }
    }
    out
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn le_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Decodes a scalar payload to f64 so that both kinds can be validated from
/// one code path. Every supported scalar converts exactly.
fn decode_scalars(payload: &[u8], code: ScalarCode, big_endian: bool) -> Vec<f64> {
    let w = code.width();
    payload
        .chunks_exact(w)
        .map(|c| {
            let mut buf = [0u8; 4];
            buf[..w].copy_from_slice(c);
            if big_endian {
                buf[..w].reverse();
            }
            match code {
                ScalarCode::F32 => f64::from(f32::from_le_bytes(buf)),
                ScalarCode::U16 => f64::from(u16::from_le_bytes([buf[0], buf[1]])),
                ScalarCode::I16 => f64::from(i16::from_le_bytes([buf[0], buf[1]])),
                ScalarCode::U8 => f64::from(buf[0]),
            }
        })
        .collect()
}

fn build_volume(
    dims: [usize; 3],
    spacing: [f32; 3],
    kind: VolumeKind,
    classes: u32,
    values: Vec<f64>,
) -> Result<Volume3D> {
    match kind {
        VolumeKind::Intensity => {
            Volume3D::intensity(dims, spacing, values.into_iter().map(|v| v as f32).collect())
        }
        VolumeKind::Label => {
            let data = values
                .into_iter()
                .map(|v| {
                    if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u16::MAX) {
                        Ok(v as u16)
                    } else {
                        Err(Error::InvalidLabel(format!("value {v} is not a label")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Volume3D::label(dims, spacing, data, classes)
        }
    }
}

pub fn decode_raw(bytes: &[u8]) -> Result<Volume3D> {
    if bytes.len() < RAW_HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "raw-grid header needs {RAW_HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[..8] != RAW_MAGIC {
        return Err(Error::MalformedHeader("bad raw-grid magic".into()));
    }
    let kind = match bytes[8] {
        0 => VolumeKind::Intensity,
        1 => VolumeKind::Label,
        k => return Err(Error::MalformedHeader(format!("unknown volume kind {k}"))),
    };
    let code = ScalarCode::from_u8(bytes[9])?;
    if bytes[10..12] != [0, 0] || bytes[40..64].iter().any(|&b| b != 0) {
        return Err(Error::MalformedHeader("non-zero reserved bytes".into()));
    }
    let dims = [
        le_u32(bytes, 12) as usize,
        le_u32(bytes, 16) as usize,
        le_u32(bytes, 20) as usize,
    ];
    let spacing = [le_f32(bytes, 24), le_f32(bytes, 28), le_f32(bytes, 32)];
    let classes = le_u32(bytes, 36);
    match kind {
        VolumeKind::Intensity if classes != 0 => {
            return Err(Error::MalformedHeader(
                "intensity volume declares a class count".into(),
            ))
        }
        VolumeKind::Label if classes == 0 => {
            return Err(Error::MalformedHeader("label volume with class count 0".into()))
        }
        _ => {}
    }
    let payload = &bytes[RAW_HEADER_LEN..];
    let width = code.width();
    let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected =
        expected.ok_or_else(|| Error::MalformedHeader(format!("dims {dims:?} overflow")))?;
    if payload.len() != expected * width {
        return Err(Error::PayloadMismatch {
            expected,
            found: payload.len() / width,
        });
    }
    build_volume(dims, spacing, kind, classes, decode_scalars(payload, code, false))
}

const NIFTI_HEADER_LEN: usize = 348;

fn looks_like_nifti(bytes: &[u8]) -> bool {
    if bytes.len() < 4 {
        return false;
    }
    let le = i32::from_le_bytes(bytes[..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[..4].try_into().unwrap());
    le == NIFTI_HEADER_LEN as i32 || be == NIFTI_HEADER_LEN as i32
}

struct NiftiFields<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl NiftiFields<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let b: [u8; 4] = self.bytes[at..at + 4].try_into().unwrap();
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

/// Reads the supported NIfTI-1 subset as an intensity volume.
pub fn decode_nifti(bytes: &[u8]) -> Result<Volume3D> {
    if bytes.len() < NIFTI_HEADER_LEN + 4 {
        return Err(Error::MalformedHeader("truncated NIfTI-1 header".into()));
    }
    let big_endian = i32::from_le_bytes(bytes[..4].try_into().unwrap()) != NIFTI_HEADER_LEN as i32;
    let h = NiftiFields { bytes, big_endian };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::MalformedHeader(
            "only single-file NIfTI-1 (magic \"n+1\") is supported".into(),
        ));
    }

    let ndim = h.i16(40);
    let dim: Vec<i16> = (0..7).map(|i| h.i16(42 + 2 * i)).collect();
    let spatial_ok = (1..=7).contains(&ndim)
        && ndim >= 3
        && dim[..ndim as usize].iter().all(|&d| d >= 1)
        && dim[3..ndim as usize].iter().all(|&d| d == 1);
    if !spatial_ok {
        return Err(Error::MalformedHeader(format!(
            "expected a 3D volume, got dim[0]={ndim}, dims {:?}",
            &dim[..ndim.clamp(0, 7) as usize]
        )));
    }
    let dims = [dim[0] as usize, dim[1] as usize, dim[2] as usize];

    let code = match h.i16(70) {
        2 => ScalarCode::U8,
        4 => ScalarCode::I16,
        16 => ScalarCode::F32,
        other => {
            return Err(Error::UnsupportedScalar(format!(
                "NIfTI datatype {other} (only uint8, int16, float32)"
            )))
        }
    };

    let slope = h.f32(112);
    let inter = h.f32(116);
    if !(slope == 0.0 || slope == 1.0) || inter != 0.0 {
        return Err(Error::MalformedHeader(format!(
            "scaled NIfTI data (scl_slope={slope}, scl_inter={inter}) is not supported"
        )));
    }

    if h.i16(252) > 0 {
        let (b, c, d) = (h.f32(256), h.f32(260), h.f32(264));
        if b != 0.0 || c != 0.0 || d != 0.0 {
            return Err(Error::MalformedHeader("oblique qform is not supported".into()));
        }
    }
    if h.i16(254) > 0 {
        for row in 0..3 {
            for col in 0..3 {
                if row != col && h.f32(280 + 16 * row + 4 * col) != 0.0 {
                    return Err(Error::MalformedHeader(
                        "sheared or rotated sform is not supported".into(),
                    ));
                }
            }
        }
    }

    let pix = [h.f32(80), h.f32(84), h.f32(88)];
    let spacing = pix.map(|s| if s.is_finite() && s != 0.0 { s.abs() } else { 1.0 });

    let vox_offset = h.f32(108);
    if !(vox_offset >= 352.0 && vox_offset.fract() == 0.0) {
        return Err(Error::MalformedHeader(format!("bad vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;
    if offset > bytes.len() {
        return Err(Error::MalformedHeader("vox_offset beyond end of file".into()));
    }
    let expected = dims[0] * dims[1] * dims[2];
    let payload = &bytes[offset..];
    let width = code.width();
    if payload.len() != expected * width {
        return Err(Error::PayloadMismatch {
            expected,
            found: payload.len() / width,
        });
    }
    build_volume(
        dims,
        spacing,
        VolumeKind::Intensity,
        0,
        decode_scalars(payload, code, big_endian),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume3D {
        let n = dims.iter().product();
        Volume3D::intensity(dims, [1.0; 3], (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn raw_payload_is_x_fastest() {
        let vol = ramp([2, 2, 2]);
        let back = decode_raw(&encode_raw(&vol)).unwrap();
        assert_eq!(back.intensities().unwrap()[7], 7.0);
        assert_eq!(back.voxel_at(VoxelIndex::new(0, 0, 0)).unwrap(), 0.0);
        assert_eq!(back.voxel_at(VoxelIndex::new(1, 0, 0)).unwrap(), 1.0);
        assert_eq!(back.voxel_at(VoxelIndex::new(0, 0, 1)).unwrap(), 4.0);
    }

    #[test]
    fn short_payload_is_rejected() {
        let mut bytes = encode_raw(&ramp([2, 2, 2]));
        bytes.truncate(bytes.len() - 4);
        match decode_raw(&bytes) {
            Err(Error::PayloadMismatch { expected: 8, found: 7 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_round_trip_keeps_kind_and_classes() {
        let vol = Volume3D::label([3, 1, 1], [1.0, 2.0, 3.0], vec![0, 1, 2], 3).unwrap();
        let back = decode_raw(&encode_raw(&vol)).unwrap();
        assert_eq!(back.kind(), VolumeKind::Label);
        assert_eq!(back.classes(), 3);
        assert_eq!(back.labels().unwrap().iter().max(), Some(&2));
        assert_eq!(back, vol);
    }

    #[test]
    fn single_voxel_has_one_scalar() {
        let vol = Volume3D::intensity([1, 1, 1], [1.0; 3], vec![4.5]).unwrap();
        assert_eq!(encode_raw(&vol).len(), RAW_HEADER_LEN + 4);
    }

    #[test]
    fn labels_outside_class_range_are_rejected() {
        assert!(Volume3D::label([2, 1, 1], [1.0; 3], vec![0, 3], 3).is_err());
        assert!(Volume3D::label([2, 1, 1], [1.0; 3], vec![0, 0], 0).is_err());
    }

    #[test]
    fn bad_geometry_is_rejected() {
        assert!(Volume3D::intensity([0, 1, 1], [1.0; 3], vec![]).is_err());
        assert!(Volume3D::intensity([1, 1, 1], [0.0, 1.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn voxel_at_checks_bounds() {
        let vol = ramp([2, 2, 2]);
        assert!(matches!(
            vol.voxel_at(VoxelIndex::new(2, 0, 0)),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn stride_formula_holds_exhaustively() {
        let vol = ramp([3, 4, 5]);
        let data = vol.intensities().unwrap();
        for z in 0..5 {
            for y in 0..4 {
                for x in 0..3 {
                    let v = vol.voxel_at(VoxelIndex::new(x, y, z)).unwrap();
                    assert_eq!(v, data[x + 3 * (y + 4 * z)]);
                    assert_eq!(vol.voxel_of(x + 3 * (y + 4 * z)), VoxelIndex::new(x, y, z));
                }
            }
        }
    }

    #[test]
    fn corrupted_reserved_bytes_are_rejected() {
        let mut bytes = encode_raw(&ramp([2, 1, 1]));
        bytes[50] = 1;
        assert!(matches!(decode_raw(&bytes), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn into_label_rejects_fractional_values() {
        let vol = Volume3D::intensity([2, 1, 1], [1.0; 3], vec![0.0, 0.5]).unwrap();
        assert!(vol.into_label(2).is_err());
    }
}
