//! Minimal reader and writer for the numpy `.npy` container.
//!
//! Writes version 1.0 headers, little-endian, C order, padded so the data
//! section starts on a 64-byte boundary. Reads versions 1.0 to 3.0 with
//! little-endian `f4`, `f8`, `i4` and `i8` payloads. Fortran order is
//! rejected.

use std::io::{Read, Write};

pub(crate) const MAGIC: [u8; 6] = *b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F4,
    F8,
    I4,
    I8,
}

impl DType {
    fn descr(self) -> &'static str {
        match self {
            DType::F4 => "<f4",
            DType::F8 => "<f8",
            DType::I4 => "<i4",
            DType::I8 => "<i8",
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F4 | DType::I4 => 4,
            DType::F8 | DType::I8 => 8,
        }
    }

    fn parse(descr: &str) -> Result<Self, String> {
        match descr {
            "<f4" => Ok(DType::F4),
            "<f8" => Ok(DType::F8),
            "<i4" => Ok(DType::I4),
            "<i8" => Ok(DType::I8),
            other => Err(format!("unsupported dtype {other:?}")),
        }
    }
}

/// Typed payload of an npy file.
#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        NpyArray {
            shape,
            data: NpyData::F32(data),
        }
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        NpyArray {
            shape,
            data: NpyData::F64(data),
        }
    }

    pub fn i64(shape: Vec<usize>, data: Vec<i64>) -> Self {
        NpyArray {
            shape,
            data: NpyData::I64(data),
        }
    }

    fn dtype(&self) -> DType {
        match self.data {
            NpyData::F32(_) => DType::F4,
            NpyData::F64(_) => DType::F8,
            NpyData::I64(_) => DType::I8,
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
            NpyData::I64(v) => v.len(),
        }
    }
}

fn header_string(dtype: DType, shape: &[usize]) -> String {
    let shape = match shape {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape
    )
}

pub fn write<W: Write>(writer: &mut W, array: &NpyArray) -> std::io::Result<()> {
    let expected: usize = array.shape.iter().product();
    if expected != array.len() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!(
                "shape {:?} does not fit {} values",
                array.shape,
                array.len()
            ),
        ));
    }

    let mut header = header_string(array.dtype(), &array.shape);
    // magic + version + u16 length + header + '\n'
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');
    let header_len = u16::try_from(header.len()).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, "npy header too long")
    })?;

    writer.write_all(&MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&header_len.to_le_bytes())?;
    writer.write_all(header.as_bytes())?;

    let mut buf = Vec::with_capacity(array.len() * array.dtype().size());
    match &array.data {
        NpyData::F32(v) => v
            .iter()
            .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        NpyData::F64(v) => v
            .iter()
            .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        NpyData::I64(v) => v
            .iter()
            .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
    }
    writer.write_all(&buf)
}

pub fn read<R: Read>(reader: &mut R) -> Result<NpyArray, String> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| format!("read failed: {e}"))?;
    parse(&bytes)
}

pub fn parse(bytes: &[u8]) -> Result<NpyArray, String> {
    if bytes.len() < 10 || bytes[..6] != MAGIC {
        return Err("bad magic bytes".into());
    }
    let major = bytes[6];
    let (header_len, offset) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err("truncated header".into());
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        v => return Err(format!("unsupported version {v}")),
    };
    let end = offset + header_len;
    if bytes.len() < end {
        return Err("truncated header".into());
    }
    let header = std::str::from_utf8(&bytes[offset..end]).map_err(|_| "header is not UTF-8")?;
    let (dtype, fortran, shape) = parse_header(header)?;
    if fortran {
        return Err("fortran order not supported".into());
    }

    let count: usize = shape.iter().product();
    let payload = &bytes[end..];
    if payload.len() != count * dtype.size() {
        return Err(format!(
            "payload holds {} bytes, shape {:?} needs {}",
            payload.len(),
            shape,
            count * dtype.size()
        ));
    }

    let data = match dtype {
        DType::F4 => NpyData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F8 => NpyData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::I4 => NpyData::I64(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as i64)
                .collect(),
        ),
        DType::I8 => NpyData::I64(
            payload
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(NpyArray { shape, data })
}

/// Parses the python-literal header dict, e.g.
/// `{'descr': '<f4', 'fortran_order': False, 'shape': (3, 4), }`.
fn parse_header(header: &str) -> Result<(DType, bool, Vec<usize>), String> {
    let body = header
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or("header is not a dict")?;

    let value_after = |key: &str| -> Result<&str, String> {
        let quoted_single = format!("'{key}'");
        let quoted_double = format!("\"{key}\"");
        let pos = body
            .find(&quoted_single)
            .map(|p| p + quoted_single.len())
            .or_else(|| body.find(&quoted_double).map(|p| p + quoted_double.len()))
            .ok_or_else(|| format!("header missing key {key}"))?;
        let rest = body[pos..].trim_start();
        rest.strip_prefix(':')
            .map(str::trim_start)
            .ok_or_else(|| format!("malformed entry for {key}"))
    };

    let descr = {
        let rest = value_after("descr")?;
        let quote = rest.chars().next().ok_or("empty descr")?;
        if quote != '\'' && quote != '"' {
            return Err("descr is not a string".into());
        }
        let inner = &rest[1..];
        let close = inner.find(quote).ok_or("unterminated descr")?;
        // '=' is native order, taken as little-endian
        let raw = &inner[..close];
        let normalized = raw.replacen('=', "<", 1);
        DType::parse(&normalized)?
    };

    let fortran = {
        let rest = value_after("fortran_order")?;
        if rest.starts_with("False") {
            false
        } else if rest.starts_with("True") {
            true
        } else {
            return Err("fortran_order is not a bool".into());
        }
    };

    let shape = {
        let rest = value_after("shape")?;
        let inner = rest
            .strip_prefix('(')
            .and_then(|s| s.find(')').map(|e| &s[..e]))
            .ok_or("shape is not a tuple")?;
        inner
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| format!("bad shape entry {s:?}"))
            })
            .collect::<Result<Vec<_>, _>>()?
    };

    Ok((descr, fortran, shape))
}
