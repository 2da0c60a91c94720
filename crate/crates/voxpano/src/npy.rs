//! NPY v1.0/2.0 reader and writer plus NPZ archive handling.
//!
//! Only little-endian, C-contiguous arrays are accepted; big-endian or
//! Fortran-order inputs are rejected with a remediation hint. Written files
//! are always NPY v1.0, little-endian, C-order, so write-then-read is
//! byte-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// A typed dense array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum NpyArray {
    U8(ArrayD<u8>),
    U16(ArrayD<u16>),
    U32(ArrayD<u32>),
    U64(ArrayD<u64>),
    I32(ArrayD<i32>),
    I64(ArrayD<i64>),
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    Bool(ArrayD<bool>),
}

impl NpyArray {
    pub fn descr(&self) -> &'static str {
        match self {
            NpyArray::U8(_) => "|u1",
            NpyArray::U16(_) => "<u2",
            NpyArray::U32(_) => "<u4",
            NpyArray::U64(_) => "<u8",
            NpyArray::I32(_) => "<i4",
            NpyArray::I64(_) => "<i8",
            NpyArray::F32(_) => "<f4",
            NpyArray::F64(_) => "<f8",
            NpyArray::Bool(_) => "|b1",
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            NpyArray::U8(a) => a.shape(),
            NpyArray::U16(a) => a.shape(),
            NpyArray::U32(a) => a.shape(),
            NpyArray::U64(a) => a.shape(),
            NpyArray::I32(a) => a.shape(),
            NpyArray::I64(a) => a.shape(),
            NpyArray::F32(a) => a.shape(),
            NpyArray::F64(a) => a.shape(),
            NpyArray::Bool(a) => a.shape(),
        }
    }

    fn elem_size(&self) -> usize {
        match self {
            NpyArray::U8(_) | NpyArray::Bool(_) => 1,
            NpyArray::U16(_) => 2,
            NpyArray::U32(_) | NpyArray::I32(_) | NpyArray::F32(_) => 4,
            NpyArray::U64(_) | NpyArray::I64(_) | NpyArray::F64(_) => 8,
        }
    }

    pub fn as_u8_3d(&self, ctx: &str) -> Result<Array3<u8>> {
        match self {
            NpyArray::U8(a) => to_3d(a.clone(), ctx),
            other => Err(Error::Validation(format!(
                "{ctx}: expected dtype |u1, file has {}",
                other.descr()
            ))),
        }
    }

    pub fn as_u32_3d(&self, ctx: &str) -> Result<Array3<u32>> {
        match self {
            NpyArray::U32(a) => to_3d(a.clone(), ctx),
            other => Err(Error::Validation(format!(
                "{ctx}: expected dtype <u4, file has {}",
                other.descr()
            ))),
        }
    }

    pub fn as_u32_2d(&self, ctx: &str) -> Result<Array2<u32>> {
        match self {
            NpyArray::U32(a) => a.clone().into_dimensionality().map_err(|_| {
                Error::Shape(format!("{ctx}: expected 2 axes, file has {:?}", self.shape()))
            }),
            other => Err(Error::Validation(format!(
                "{ctx}: expected dtype <u4, file has {}",
                other.descr()
            ))),
        }
    }

    /// Real-valued tensors accept both <f4 and <f8 on input.
    pub fn as_f32_3d(&self, ctx: &str) -> Result<Array3<f32>> {
        match self {
            NpyArray::F32(a) => to_3d(a.clone(), ctx),
            NpyArray::F64(a) => to_3d(a.mapv(|v| v as f32), ctx),
            other => Err(Error::Validation(format!(
                "{ctx}: expected dtype <f4 or <f8, file has {}",
                other.descr()
            ))),
        }
    }

    pub fn as_bool_2d(&self, ctx: &str) -> Result<Array2<bool>> {
        match self {
            NpyArray::Bool(a) => a.clone().into_dimensionality().map_err(|_| {
                Error::Shape(format!("{ctx}: expected 2 axes, file has {:?}", self.shape()))
            }),
            other => Err(Error::Validation(format!(
                "{ctx}: expected dtype |b1, file has {}",
                other.descr()
            ))),
        }
    }
}

fn to_3d<T>(a: ArrayD<T>, ctx: &str) -> Result<Array3<T>> {
    let shape = a.shape().to_vec();
    a.into_dimensionality().map_err(|_| {
        Error::Shape(format!("{ctx}: expected 3 axes, file has {shape:?}"))
    })
}

fn fmt_err(path: &str, reason: impl Into<String>) -> Error {
    Error::NpyFormat {
        path: path.to_string(),
        reason: reason.into(),
    }
}

/// Serializes to NPY v1.0 bytes: little-endian, C-order, header padded to a
/// 64-byte boundary.
pub fn encode(array: &NpyArray) -> Vec<u8> {
    let shape_str = match array.shape() {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        array.descr(),
        shape_str
    );
    let unpadded = MAGIC.len() + 4 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    let header_len = (dict.len() + pad + 1) as u16;

    let n_elems: usize = array.shape().iter().product();
    let mut out = Vec::with_capacity(unpadded + pad + n_elems * array.elem_size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', pad));
    out.push(b'\n');

    macro_rules! put {
        ($arr:expr) => {
            for v in $arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
    }
    match array {
        NpyArray::U8(a) => out.extend(a.iter().copied()),
        NpyArray::U16(a) => put!(a),
        NpyArray::U32(a) => put!(a),
        NpyArray::U64(a) => put!(a),
        NpyArray::I32(a) => put!(a),
        NpyArray::I64(a) => put!(a),
        NpyArray::F32(a) => put!(a),
        NpyArray::F64(a) => put!(a),
        NpyArray::Bool(a) => out.extend(a.iter().map(|&b| b as u8)),
    }
    out
}

/// Parses NPY bytes; `path` is used only in diagnostics.
pub fn decode(bytes: &[u8], path: &str) -> Result<NpyArray> {
    if bytes.len() < 10 {
        return Err(fmt_err(path, "file shorter than the NPY preamble"));
    }
    if &bytes[..6] != MAGIC {
        return Err(fmt_err(path, "missing NPY magic string"));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, header_start) = match (major, minor) {
        (1, 0) => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        (2, 0) => {
            if bytes.len() < 12 {
                return Err(fmt_err(path, "truncated v2.0 header length field"));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        _ => {
            return Err(fmt_err(
                path,
                format!("unsupported NPY version {major}.{minor}"),
            ));
        }
    };
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start {
        return Err(fmt_err(path, "truncated header"));
    }
    let header = std::str::from_utf8(&bytes[header_start..payload_start])
        .map_err(|_| fmt_err(path, "header is not valid UTF-8"))?;

    let descr = extract_quoted(header, "descr")
        .ok_or_else(|| fmt_err(path, "header lacks a 'descr' field"))?;
    if descr.starts_with('>') {
        return Err(fmt_err(
            path,
            format!(
                "big-endian dtype {descr} is not supported; re-save the array \
                 as little-endian (e.g. arr.astype(arr.dtype.newbyteorder('<')))"
            ),
        ));
    }
    let fortran = extract_bool(header, "fortran_order")
        .ok_or_else(|| fmt_err(path, "header lacks a 'fortran_order' field"))?;
    if fortran {
        return Err(fmt_err(
            path,
            "Fortran-order arrays are not supported; re-save with \
             numpy.ascontiguousarray(arr)",
        ));
    }
    let shape = extract_shape(header)
        .ok_or_else(|| fmt_err(path, "header lacks a parseable 'shape' field"))?;

    let n_elems: usize = shape.iter().product();
    let payload = &bytes[payload_start..];
    macro_rules! read_into {
        ($t:ty, $size:expr, $variant:ident) => {{
            let expected = n_elems * $size;
            if payload.len() != expected {
                return Err(fmt_err(
                    path,
                    format!(
                        "payload length mismatch: expected {expected} bytes for shape \
                         {shape:?} dtype {descr}, found {}",
                        payload.len()
                    ),
                ));
            }
            let data: Vec<$t> = payload
                .chunks_exact($size)
                .map(|c| <$t>::from_le_bytes(c.try_into().unwrap()))
                .collect();
            NpyArray::$variant(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap())
        }};
    }
    let array = match descr.as_str() {
        "|u1" | "<u1" => read_into!(u8, 1, U8),
        "<u2" => read_into!(u16, 2, U16),
        "<u4" => read_into!(u32, 4, U32),
        "<u8" => read_into!(u64, 8, U64),
        "<i4" => read_into!(i32, 4, I32),
        "<i8" => read_into!(i64, 8, I64),
        "<f4" => read_into!(f32, 4, F32),
        "<f8" => read_into!(f64, 8, F64),
        "|b1" => {
            if payload.len() != n_elems {
                return Err(fmt_err(
                    path,
                    format!(
                        "payload length mismatch: expected {n_elems} bytes for shape \
                         {shape:?} dtype |b1, found {}",
                        payload.len()
                    ),
                ));
            }
            let data: Vec<bool> = payload.iter().map(|&b| b != 0).collect();
            NpyArray::Bool(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap())
        }
        other => {
            return Err(fmt_err(path, format!("unsupported dtype {other}")));
        }
    };
    Ok(array)
}

pub fn read_array(path: impl AsRef<Path>) -> Result<NpyArray> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes, &path.display().to_string())
}

pub fn write_array(path: impl AsRef<Path>, array: &NpyArray) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(array)).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads every member of an NPZ archive.
pub fn read_npz(path: impl AsRef<Path>) -> Result<BTreeMap<String, NpyArray>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(display.clone(), e))?;
    let mut archive = zip::ZipArchive::new(file)
        .map_err(|e| fmt_err(&display, format!("not a readable NPZ archive: {e}")))?;
    let mut out = BTreeMap::new();
    for idx in 0..archive.len() {
        let mut entry = archive
            .by_index(idx)
            .map_err(|e| fmt_err(&display, format!("bad archive entry {idx}: {e}")))?;
        let name = entry
            .name()
            .strip_suffix(".npy")
            .unwrap_or(entry.name())
            .to_string();
        let mut bytes = Vec::new();
        entry
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(format!("{display}#{name}"), e))?;
        out.insert(name.clone(), decode(&bytes, &format!("{display}#{name}"))?);
    }
    Ok(out)
}

/// Writes an NPZ archive with stored (uncompressed) members in the given
/// order. Output bytes depend only on the entries, so identical inputs
/// produce identical archives.
pub fn write_npz(path: impl AsRef<Path>, entries: &[(&str, NpyArray)]) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = std::fs::File::create(path).map_err(|e| Error::io(display.clone(), e))?;
    let mut writer = zip::ZipWriter::new(file);
    let options = zip::write::SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default());
    for (name, array) in entries {
        writer
            .start_file(format!("{name}.npy"), options)
            .map_err(|e| fmt_err(&display, format!("cannot start member {name}: {e}")))?;
        writer
            .write_all(&encode(array))
            .map_err(|e| Error::io(display.clone(), e))?;
    }
    writer
        .finish()
        .map_err(|e| fmt_err(&display, format!("cannot finalize archive: {e}")))?;
    Ok(())
}

fn extract_quoted(header: &str, key: &str) -> Option<String> {
    let pos = header.find(&format!("'{key}'"))?;
    let rest = &header[pos + key.len() + 2..];
    let colon = rest.find(':')?;
    let rest = rest[colon + 1..].trim_start();
    let quote = rest.chars().next()?;
    if quote != '\'' && quote != '"' {
        return None;
    }
    let end = rest[1..].find(quote)?;
    Some(rest[1..1 + end].to_string())
}

fn extract_bool(header: &str, key: &str) -> Option<bool> {
    let pos = header.find(&format!("'{key}'"))?;
    let rest = &header[pos + key.len() + 2..];
    let colon = rest.find(':')?;
    let rest = rest[colon + 1..].trim_start();
    if rest.starts_with("True") {
        Some(true)
    } else if rest.starts_with("False") {
        Some(false)
    } else {
        None
    }
}

fn extract_shape(header: &str) -> Option<Vec<usize>> {
    let pos = header.find("'shape'")?;
    let rest = &header[pos + 7..];
    let open = rest.find('(')?;
    let close = rest[open..].find(')')? + open;
    let inner = &rest[open + 1..close];
    let mut dims = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        dims.push(part.parse().ok()?);
    }
    Some(dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    #[test]
    fn roundtrip_every_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let arrays = vec![
            NpyArray::U8(arr3(&[[[1u8, 2], [3, 4]]]).into_dyn()),
            NpyArray::U16(arr3(&[[[1u16, 500]]]).into_dyn()),
            NpyArray::U32(arr3(&[[[1u32, 70000]]]).into_dyn()),
            NpyArray::I64(arr3(&[[[-5i64, 9]]]).into_dyn()),
            NpyArray::F32(arr3(&[[[0.5f32, -1.25]]]).into_dyn()),
            NpyArray::F64(arr3(&[[[0.1f64, 2.0]]]).into_dyn()),
            NpyArray::Bool(arr3(&[[[true, false]]]).into_dyn()),
        ];
        for (n, a) in arrays.iter().enumerate() {
            let p = dir.path().join(format!("a{n}.npy"));
            write_array(&p, a).unwrap();
            let back = read_array(&p).unwrap();
            assert_eq!(&back, a);
            // byte-for-byte stable
            let bytes = std::fs::read(&p).unwrap();
            assert_eq!(bytes, encode(&back));
        }
    }

    #[test]
    fn header_is_64_byte_aligned() {
        let a = NpyArray::U8(ArrayD::zeros(IxDyn(&[3, 3])));
        let bytes = encode(&a);
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(bytes[10 + header_len - 1], b'\n');
    }

    #[test]
    fn rejects_truncation_with_byte_counts() {
        let a = NpyArray::F32(ArrayD::zeros(IxDyn(&[4, 4])));
        let mut bytes = encode(&a);
        bytes.truncate(bytes.len() - 7);
        let err = decode(&bytes, "t.npy").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 64 bytes"), "got: {msg}");
        assert!(msg.contains("found 57"), "got: {msg}");
    }

    #[test]
    fn rejects_fortran_order_with_hint() {
        let header = "{'descr': '<f4', 'fortran_order': True, 'shape': (2, 2), }";
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        let err = decode(&bytes, "t.npy").unwrap_err();
        assert!(err.to_string().contains("ascontiguousarray"));
    }

    #[test]
    fn rejects_big_endian_with_hint() {
        let header = "{'descr': '>f4', 'fortran_order': False, 'shape': (2, 2), }";
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        let err = decode(&bytes, "t.npy").unwrap_err();
        assert!(err.to_string().contains("little-endian"));
    }

    #[test]
    fn npz_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let sem = NpyArray::U8(ArrayD::zeros(IxDyn(&[2, 2, 2])));
        let heat = NpyArray::F32(ArrayD::zeros(IxDyn(&[2, 2, 1])));
        let p1 = dir.path().join("a.npz");
        let p2 = dir.path().join("b.npz");
        let entries = vec![("sem", sem.clone()), ("heat", heat.clone())];
        write_npz(&p1, &entries).unwrap();
        write_npz(&p2, &entries).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = read_npz(&p1).unwrap();
        assert_eq!(back["sem"], sem);
        assert_eq!(back["heat"], heat);
    }

    #[test]
    fn accepts_numpy_v2_header() {
        let a = NpyArray::U8(ArrayD::zeros(IxDyn(&[2])));
        let v1 = encode(&a);
        let header_len = u16::from_le_bytes([v1[8], v1[9]]) as u32;
        let mut v2 = Vec::new();
        v2.extend_from_slice(MAGIC);
        v2.extend_from_slice(&[2, 0]);
        v2.extend_from_slice(&header_len.to_le_bytes());
        v2.extend_from_slice(&v1[10..]);
        assert_eq!(decode(&v2, "t.npy").unwrap(), a);
    }
}
