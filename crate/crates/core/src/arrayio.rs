//! Chunked array container, the on-disk format shared by every module.
//!
//! Layout of a `.arr` file:
//!
//! ```text
//! bytes 0..4   magic "ARR1"
//! bytes 4..8   u32 little-endian header length H
//! bytes 8..8+H header JSON: { version, dtype, shape, chunk_len, chunks }
//! data         chunks back to back, raw little-endian values
//! ```
//!
//! Arrays are chunked along axis 0 (`chunk_len` leading slices per chunk),
//! so frames or slot timesteps can be read back without loading the whole
//! file. `chunks` records byte offsets relative to the end of the header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArrayIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed array file: {0}")]
    Format(String),
    #[error("dtype mismatch: file holds {found}, requested {requested}")]
    Dtype { found: String, requested: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    shape: Vec<usize>,
    chunk_len: usize,
    chunks: Vec<ChunkRef>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChunkRef {
    offset: u64,
    len_bytes: u64,
}

/// Element types the container can hold.
pub trait Element: Copy + Default {
    const DTYPE: &'static str;
    const SIZE: usize;
    fn write_le(xs: &[Self], out: &mut Vec<u8>);
    fn read_le(bytes: &[u8], out: &mut Vec<Self>) -> Result<(), ArrayIoError>;
}

macro_rules! impl_element {
    ($t:ty, $name:expr, $size:expr) => {
        impl Element for $t {
            const DTYPE: &'static str = $name;
            const SIZE: usize = $size;
            fn write_le(xs: &[Self], out: &mut Vec<u8>) {
                out.reserve(xs.len() * Self::SIZE);
                for x in xs {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            fn read_le(bytes: &[u8], out: &mut Vec<Self>) -> Result<(), ArrayIoError> {
                if bytes.len() % Self::SIZE != 0 {
                    return Err(ArrayIoError::Format("chunk size not a multiple of element size".into()));
                }
                out.reserve(bytes.len() / Self::SIZE);
                for c in bytes.chunks_exact(Self::SIZE) {
                    out.push(<$t>::from_le_bytes(c.try_into().unwrap()));
                }
                Ok(())
            }
        }
    };
}

impl_element!(f32, "f32", 4);
impl_element!(f64, "f64", 8);
impl_element!(u16, "u16", 2);
impl_element!(i64, "i64", 8);

const MAGIC: &[u8; 4] = b"ARR1";
/// Target chunk payload; axis-0 slices are grouped up to roughly this size.
const TARGET_CHUNK_BYTES: usize = 1 << 20;

/// Writes `arr` to `path`, chunked along axis 0.
pub fn save<T: Element>(path: &Path, arr: &ArrayD<T>) -> Result<(), ArrayIoError> {
    let shape: Vec<usize> = arr.shape().to_vec();
    let lead = shape.first().copied().unwrap_or(1).max(1);
    let slice_elems: usize = shape.iter().skip(1).product::<usize>().max(1);
    let slice_bytes = slice_elems * T::SIZE;
    let chunk_len = (TARGET_CHUNK_BYTES / slice_bytes.max(1)).clamp(1, lead);

    // standard layout so the raw element order is row-major
    let contiguous;
    let slice: &[T] = match arr.as_slice() {
        Some(s) => s,
        None => {
            contiguous = arr.as_standard_layout().to_owned();
            contiguous.as_slice().unwrap()
        }
    };

    let mut chunks = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut start = 0usize;
    while start < lead {
        let end = (start + chunk_len).min(lead);
        let lo = start * slice_elems;
        let hi = end * slice_elems;
        let offset = payload.len() as u64;
        T::write_le(&slice[lo..hi], &mut payload);
        chunks.push(ChunkRef {
            offset,
            len_bytes: (payload.len() as u64) - offset,
        });
        start = end;
    }

    let header = Header {
        version: 1,
        dtype: T::DTYPE.to_string(),
        shape,
        chunk_len,
        chunks,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| ArrayIoError::Format(format!("header encode: {e}")))?;

    let tmp = path.with_extension("arr.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header_json.len() as u32).to_le_bytes())?;
        w.write_all(&header_json)?;
        w.write_all(&payload)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_header(r: &mut BufReader<File>) -> Result<(Header, u64), ArrayIoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ArrayIoError::Format("bad magic".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let hlen = u32::from_le_bytes(len) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)?;
    let header: Header = serde_json::from_slice(&hbytes)
        .map_err(|e| ArrayIoError::Format(format!("header decode: {e}")))?;
    if header.version != 1 {
        return Err(ArrayIoError::Format(format!("unsupported version {}", header.version)));
    }
    Ok((header, (8 + hlen) as u64))
}

/// Loads the whole array.
pub fn load<T: Element>(path: &Path) -> Result<ArrayD<T>, ArrayIoError> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, _) = read_header(&mut r)?;
    if header.dtype != T::DTYPE {
        return Err(ArrayIoError::Dtype {
            found: header.dtype,
            requested: T::DTYPE.to_string(),
        });
    }
    let total: usize = header.shape.iter().product::<usize>().max(1);
    let mut values: Vec<T> = Vec::with_capacity(total);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    T::read_le(&buf, &mut values)?;
    if values.len() != total {
        return Err(ArrayIoError::Format(format!(
            "expected {} elements, file holds {}",
            total,
            values.len()
        )));
    }
    ArrayD::from_shape_vec(IxDyn(&header.shape), values)
        .map_err(|e| ArrayIoError::Format(format!("shape: {e}")))
}

/// Loads only axis-0 slices `range.start..range.end`, touching just the
/// chunks that cover the range.
pub fn load_range<T: Element>(
    path: &Path,
    range: std::ops::Range<usize>,
) -> Result<ArrayD<T>, ArrayIoError> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, data_start) = read_header(&mut r)?;
    if header.dtype != T::DTYPE {
        return Err(ArrayIoError::Dtype {
            found: header.dtype,
            requested: T::DTYPE.to_string(),
        });
    }
    let lead = header.shape.first().copied().unwrap_or(1);
    if range.end > lead || range.start > range.end {
        return Err(ArrayIoError::Format(format!(
            "range {}..{} out of bounds for leading axis {}",
            range.start, range.end, lead
        )));
    }
    let slice_elems: usize = header.shape.iter().skip(1).product::<usize>().max(1);

    let first_chunk = range.start / header.chunk_len;
    let last_chunk = if range.is_empty() {
        first_chunk
    } else {
        (range.end - 1) / header.chunk_len + 1
    };
    let mut values: Vec<T> = Vec::new();
    for (ci, chunk) in header
        .chunks
        .iter()
        .enumerate()
        .take(last_chunk)
        .skip(first_chunk)
    {
        r.seek(SeekFrom::Start(data_start + chunk.offset))?;
        let mut bytes = vec![0u8; chunk.len_bytes as usize];
        r.read_exact(&mut bytes)?;
        let mut chunk_vals: Vec<T> = Vec::new();
        T::read_le(&bytes, &mut chunk_vals)?;
        let chunk_lo = ci * header.chunk_len;
        let lo = range.start.max(chunk_lo) - chunk_lo;
        let hi = range.end.min(chunk_lo + chunk_vals.len() / slice_elems) - chunk_lo;
        values.extend_from_slice(&chunk_vals[lo * slice_elems..hi * slice_elems]);
    }
    let mut shape = header.shape.clone();
    shape[0] = range.end - range.start;
    ArrayD::from_shape_vec(IxDyn(&shape), values)
        .map_err(|e| ArrayIoError::Format(format!("shape: {e}")))
}

/// Reads just the shape and dtype.
pub fn peek(path: &Path) -> Result<(Vec<usize>, String), ArrayIoError> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, _) = read_header(&mut r)?;
    Ok((header.shape, header.dtype))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn round_trip_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.arr");
        let arr = Array::from_shape_fn(IxDyn(&[7, 3, 2]), |ix| {
            (ix[0] * 100 + ix[1] * 10 + ix[2]) as f32 * 0.5
        });
        save(&p, &arr).unwrap();
        let back = load::<f32>(&p).unwrap();
        assert_eq!(arr, back);
    }

    #[test]
    fn round_trip_u16_and_peek() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.arr");
        let arr = Array::from_shape_fn(IxDyn(&[4, 5]), |ix| (ix[0] * 5 + ix[1]) as u16);
        save(&p, &arr).unwrap();
        let (shape, dtype) = peek(&p).unwrap();
        assert_eq!(shape, vec![4, 5]);
        assert_eq!(dtype, "u16");
        assert_eq!(load::<u16>(&p).unwrap(), arr);
    }

    #[test]
    fn partial_range_matches_full_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.arr");
        // large slices force several chunks
        let arr = Array::from_shape_fn(IxDyn(&[20, 300, 300]), |ix| {
            (ix[0] as f32) + (ix[1] as f32) * 1e-3 + (ix[2] as f32) * 1e-6
        });
        save(&p, &arr).unwrap();
        let part = load_range::<f32>(&p, 3..11).unwrap();
        let full = load::<f32>(&p).unwrap();
        assert_eq!(part, full.slice(ndarray::s![3..11, .., ..]).to_owned().into_dyn());
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.arr");
        let arr = Array::from_shape_fn(IxDyn(&[2, 2]), |_| 1.0f32);
        save(&p, &arr).unwrap();
        assert!(matches!(load::<f64>(&p), Err(ArrayIoError::Dtype { .. })));
    }
}
