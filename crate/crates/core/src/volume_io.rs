//! Reading and writing `.npy` array files.
//!
//! Versions 1.0 through 3.0 of the format are accepted. Integer, boolean and
//! floating element types in either byte order are converted to `f32`;
//! Fortran-ordered arrays are transposed to row-major.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

const MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} is not an array file (bad magic)")]
    BadMagic(PathBuf),
    #[error("{path}: unsupported element type '{descr}'")]
    UnsupportedDtype { path: PathBuf, descr: String },
    #[error("{path}: expected a 3D array, found shape {shape:?}")]
    NotThreeDimensional { path: PathBuf, shape: Vec<usize> },
    #[error("{path}: malformed header: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("{path}: expected {expected} data bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
}

/// A single-modality 3D volume in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "volume data does not match shape");
        Self { shape, data }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }
}

/// An array as stored on disk, before conversion to a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Bool,
    Int,
    Uint,
    Float,
}

struct Dtype {
    kind: Kind,
    size: usize,
    big_endian: bool,
}

fn parse_descr(descr: &str) -> Option<Dtype> {
    let (order, rest) = descr.split_at(1);
    let big_endian = match order {
        "<" | "|" | "=" => false,
        ">" => true,
        _ => return None,
    };
    let (code, size) = rest.split_at(1);
    let size: usize = size.parse().ok()?;
    let kind = match code {
        "b" | "?" if size == 1 => Kind::Bool,
        "i" if matches!(size, 1 | 2 | 4 | 8) => Kind::Int,
        "u" if matches!(size, 1 | 2 | 4 | 8) => Kind::Uint,
        "f" if matches!(size, 2 | 4 | 8) => Kind::Float,
        _ => return None,
    };
    Some(Dtype { kind, size, big_endian })
}

fn f16_to_f32(bits: u16) -> f32 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let frac = (bits & 0x3ff) as f32;
    match exp {
        0 => sign * frac * 2f32.powi(-24),
        31 if frac == 0.0 => sign * f32::INFINITY,
        31 => f32::NAN,
        e => sign * (1.0 + frac / 1024.0) * 2f32.powi(e - 15),
    }
}

fn decode(bytes: &[u8], dt: &Dtype) -> f32 {
    let mut buf = [0u8; 8];
    buf[..dt.size].copy_from_slice(bytes);
    if dt.big_endian {
        buf[..dt.size].reverse();
    }
    match (dt.kind, dt.size) {
        (Kind::Bool, _) => (buf[0] != 0) as u8 as f32,
        (Kind::Int, 1) => buf[0] as i8 as f32,
        (Kind::Int, 2) => i16::from_le_bytes([buf[0], buf[1]]) as f32,
        (Kind::Int, 4) => i32::from_le_bytes(buf[..4].try_into().unwrap()) as f32,
        (Kind::Int, _) => i64::from_le_bytes(buf) as f32,
        (Kind::Uint, 1) => buf[0] as f32,
        (Kind::Uint, 2) => u16::from_le_bytes([buf[0], buf[1]]) as f32,
        (Kind::Uint, 4) => u32::from_le_bytes(buf[..4].try_into().unwrap()) as f32,
        (Kind::Uint, _) => u64::from_le_bytes(buf) as f32,
        (Kind::Float, 2) => f16_to_f32(u16::from_le_bytes([buf[0], buf[1]])),
        (Kind::Float, 4) => f32::from_le_bytes(buf[..4].try_into().unwrap()),
        (Kind::Float, _) => f64::from_le_bytes(buf) as f32,
    }
}

/// Value of `'key': ...` inside the header dictionary, up to the next top-level comma.
fn header_field<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let pat_single = format!("'{key}'");
    let pat_double = format!("\"{key}\"");
    let start = header.find(&pat_single).map(|i| i + pat_single.len()).or_else(|| header.find(&pat_double).map(|i| i + pat_double.len()))?;
    let rest = header[start..].trim_start().strip_prefix(':')?.trim_start();
    let mut depth = 0;
    for (i, c) in rest.char_indices() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            ',' | '}' if depth == 0 => return Some(rest[..i].trim()),
            _ => {}
        }
    }
    None
}

fn parse_header(header: &str, path: &Path) -> Result<(Dtype, bool, Vec<usize>), VolumeError> {
    let bad = |reason: &str| VolumeError::BadHeader { path: path.to_path_buf(), reason: reason.to_string() };
    let descr = header_field(header, "descr").ok_or_else(|| bad("missing 'descr'"))?;
    let descr = descr.trim_matches(|c| c == '\'' || c == '"');
    let dtype = parse_descr(descr).ok_or_else(|| VolumeError::UnsupportedDtype { path: path.to_path_buf(), descr: descr.to_string() })?;
    let fortran = match header_field(header, "fortran_order").ok_or_else(|| bad("missing 'fortran_order'"))? {
        "True" => true,
        "False" => false,
        other => return Err(bad(&format!("fortran_order is '{other}'"))),
    };
    let shape_text = header_field(header, "shape").ok_or_else(|| bad("missing 'shape'"))?;
    let inner = shape_text.strip_prefix('(').and_then(|s| s.strip_suffix(')')).ok_or_else(|| bad("shape is not a tuple"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.trim_end_matches('L').parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| bad("shape entries must be non-negative integers"))?;
    Ok((dtype, fortran, shape))
}

/// Reverses the axis order of a column-major buffer into row-major.
fn fortran_to_c(data: Vec<f32>, shape: &[usize]) -> Vec<f32> {
    if shape.len() < 2 {
        return data;
    }
    let n = data.len();
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; shape.len()];
    for value in data.into_iter() {
        // `idx` walks the column-major order; place it at its row-major offset.
        let mut off = 0;
        for (a, &i) in idx.iter().enumerate() {
            off = off * shape[a] + i;
        }
        out[off] = value;
        for (a, i) in idx.iter_mut().enumerate() {
            *i += 1;
            if *i < shape[a] {
                break;
            }
            *i = 0;
        }
    }
    out
}

/// Reads an array file of any rank.
pub fn read_array(path: &Path) -> Result<Array, VolumeError> {
    let bytes = fs::read(path).map_err(|source| VolumeError::Io { path: path.to_path_buf(), source })?;
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(VolumeError::BadMagic(path.to_path_buf()));
    }
    let bad = |reason: &str| VolumeError::BadHeader { path: path.to_path_buf(), reason: reason.to_string() };
    let (header_len, header_start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, 12),
        v => return Err(bad(&format!("unsupported format version {v}"))),
    };
    let data_start = header_start + header_len;
    let header = bytes.get(header_start..data_start).ok_or_else(|| bad("header runs past end of file"))?;
    let header = std::str::from_utf8(header).map_err(|_| bad("header is not text"))?;
    let (dtype, fortran, shape) = parse_header(header, path)?;
    let count: usize = shape.iter().product();
    let expected = count * dtype.size;
    let body = &bytes[data_start..];
    if body.len() < expected {
        return Err(VolumeError::Truncated { path: path.to_path_buf(), expected, found: body.len() });
    }
    let data: Vec<f32> = body[..expected].chunks_exact(dtype.size).map(|c| decode(c, &dtype)).collect();
    let data = if fortran { fortran_to_c(data, &shape) } else { data };
    Ok(Array { shape, data })
}

pub fn read_volume(path: &Path) -> Result<Volume, VolumeError> {
    let a = read_array(path)?;
    match a.shape[..] {
        [d0, d1, d2] => Ok(Volume::new([d0, d1, d2], a.data)),
        _ => Err(VolumeError::NotThreeDimensional { path: path.to_path_buf(), shape: a.shape }),
    }
}

/// Shape of an array file, read from the header alone.
pub fn read_shape(path: &Path) -> Result<Vec<usize>, VolumeError> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|source| VolumeError::Io { path: path.to_path_buf(), source })?;
    let mut head = vec![0u8; 4096];
    let mut filled = 0;
    while filled < head.len() {
        match f.read(&mut head[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(source) => return Err(VolumeError::Io { path: path.to_path_buf(), source }),
        }
    }
    head.truncate(filled);
    if head.len() < 10 || &head[..6] != MAGIC {
        return Err(VolumeError::BadMagic(path.to_path_buf()));
    }
    let (len, start) = match head[6] {
        1 => (u16::from_le_bytes([head[8], head[9]]) as usize, 10),
        _ if head.len() >= 12 => (u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize, 12),
        _ => return Err(VolumeError::BadHeader { path: path.to_path_buf(), reason: "short header".into() }),
    };
    let Some(text) = head.get(start..start + len).and_then(|h| std::str::from_utf8(h).ok()) else {
        // Very long header: fall back to a full read.
        return read_array(path).map(|a| a.shape);
    };
    parse_header(text, path).map(|(_, _, shape)| shape)
}

/// Element types that can be written.
pub trait NpyElement: Copy {
    const DESCR: &'static str;
    fn put(self, out: &mut Vec<u8>);
}

macro_rules! npy_element {
    ($t:ty, $d:literal) => {
        impl NpyElement for $t {
            const DESCR: &'static str = $d;
            fn put(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
        }
    };
}

npy_element!(u8, "|u1");
npy_element!(i16, "<i2");
npy_element!(i32, "<i4");
npy_element!(f32, "<f4");
npy_element!(f64, "<f8");

/// Serializes a C-ordered array as a version 1.0 array file.
pub fn encode_npy<E: NpyElement>(shape: &[usize], data: &[E]) -> Vec<u8> {
    assert_eq!(shape.iter().product::<usize>(), data.len(), "array data does not match shape");
    let dims = match shape {
        [d] => format!("({d},)"),
        _ => format!("({})", shape.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")),
    };
    let mut header = format!("{{'descr': '{}', 'fortran_order': False, 'shape': {dims}, }}", E::DESCR);
    // Pad so the data starts on a 64-byte boundary, newline-terminated.
    let total = MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat((64 - total % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &v in data {
        v.put(&mut out);
    }
    out
}

pub fn write_array<E: NpyElement>(path: &Path, shape: &[usize], data: &[E]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_npy(shape, data))?;
    f.sync_data()
}

pub fn write_volume(path: &Path, v: &Volume) -> std::io::Result<()> {
    write_array(path, &v.shape, &v.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(descr: &str, fortran: bool, shape: &str, body: &[u8], version: u8) -> Vec<u8> {
        let mut header = format!("{{'descr': '{descr}', 'fortran_order': {}, 'shape': {shape}, }}\n", if fortran { "True" } else { "False" });
        while (header.len() + 12) % 16 != 0 {
            header.insert(header.len() - 1, ' ');
        }
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&[version, 0]);
        if version == 1 {
            out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        } else {
            out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        }
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(body);
        out
    }

    fn read_bytes(bytes: &[u8]) -> Result<Array, VolumeError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        fs::write(&p, bytes).unwrap();
        read_array(&p)
    }

    #[test]
    fn int16_volume_round_trips_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ct.npy");
        let data: Vec<i16> = (0..64 * 64 * 32).map(|i| (i % 2000) as i16 - 1000).collect();
        write_array(&p, &[64, 64, 32], &data).unwrap();
        let v = read_volume(&p).unwrap();
        assert_eq!(v.shape, [64, 64, 32]);
        assert!(v.data.iter().zip(&data).all(|(a, &b)| *a == b as f32));
        assert_eq!(read_shape(&p).unwrap(), vec![64, 64, 32]);
    }

    #[test]
    fn float_volume_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pet.npy");
        let v = Volume::new([2, 3, 4], (0..24).map(|i| (i as f32).sin() * 1e-3).collect());
        write_volume(&p, &v).unwrap();
        let back = read_volume(&p).unwrap();
        assert!(v.data.iter().zip(&back.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_is_aligned_and_well_formed() {
        let bytes = encode_npy(&[3], &[1u8, 2, 3]);
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(bytes[10 + header_len - 1], b'\n');
        assert_eq!(read_bytes(&bytes).unwrap().shape, vec![3]);
    }

    #[test]
    fn two_dimensional_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flat.npy");
        write_array(&p, &[4, 4], &[0f32; 16]).unwrap();
        assert!(matches!(read_volume(&p), Err(VolumeError::NotThreeDimensional { .. })));
    }

    #[test]
    fn bad_magic_and_dtype_are_reported() {
        assert!(matches!(read_bytes(b"not an array file at all"), Err(VolumeError::BadMagic(_))));
        let bytes = raw("<c16", false, "(1,)", &[0; 16], 1);
        assert!(matches!(read_bytes(&bytes), Err(VolumeError::UnsupportedDtype { .. })));
    }

    #[test]
    fn big_endian_version_two_and_fortran_order() {
        // 2x3 array [[0, 1, 2], [3, 4, 5]] stored column-major as >i4.
        let col_major = [0i32, 3, 1, 4, 2, 5];
        let body: Vec<u8> = col_major.iter().flat_map(|v| v.to_be_bytes()).collect();
        let a = read_bytes(&raw(">i4", true, "(2, 3)", &body, 2)).unwrap();
        assert_eq!(a.shape, vec![2, 3]);
        assert_eq!(a.data, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn fortran_order_three_dimensional() {
        let shape = [2usize, 3, 4];
        // Column-major buffer holding value = row-major offset.
        let mut body = Vec::new();
        for k in 0..4 {
            for j in 0..3 {
                for i in 0..2 {
                    body.extend_from_slice(&(((i * 3 + j) * 4 + k) as f64).to_le_bytes());
                }
            }
        }
        let a = read_bytes(&raw("<f8", true, "(2, 3, 4)", &body, 1)).unwrap();
        assert_eq!(a.shape, shape.to_vec());
        assert_eq!(a.data, (0..24).map(|v| v as f32).collect::<Vec<_>>());
    }

    #[test]
    fn half_bool_and_unsigned_types_decode() {
        let half: Vec<u8> = [0x3c00u16, 0xc000, 0x3800].iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(read_bytes(&raw("<f2", false, "(3,)", &half, 1)).unwrap().data, vec![1.0, -2.0, 0.5]);
        assert_eq!(read_bytes(&raw("|b1", false, "(2,)", &[0, 1], 1)).unwrap().data, vec![0.0, 1.0]);
        assert_eq!(read_bytes(&raw("|u1", false, "(2,)", &[7, 255], 1)).unwrap().data, vec![7.0, 255.0]);
        assert_eq!(read_bytes(&raw("|i1", false, "(1,)", &[0xff], 1)).unwrap().data, vec![-1.0]);
    }

    #[test]
    fn truncated_data_is_detected() {
        let mut bytes = encode_npy(&[2, 2, 2], &[1f32; 8]);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(read_bytes(&bytes), Err(VolumeError::Truncated { .. })));
    }
}
