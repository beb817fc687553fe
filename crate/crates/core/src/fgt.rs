//! The FGT1 binary tensor format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FGT1"
//! 4       4     u32 LE channel count C
//! 8       4     u32 LE height H
//! 12      4     u32 LE width W
//! 16      1     dtype tag: 0 = float32, 1 = float64
//! 17      3     reserved, zero
//! 20      ...   C*H*W little-endian samples, channel-major then row-major
//! ```
//!
//! Feature maps are written as float32. Float64 payloads are used only for
//! training checkpoints, where weights must survive a round trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, Sample};

pub const MAGIC: &[u8; 4] = b"FGT1";
pub const HEADER_LEN: usize = 20;

/// A decoded tensor of either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyGrid {
    F32(Grid<f32>),
    F64(Grid<f64>),
}

impl AnyGrid {
    pub fn shape(&self) -> (usize, usize, usize) {
        match self {
            AnyGrid::F32(g) => (g.channels(), g.height(), g.width()),
            AnyGrid::F64(g) => (g.channels(), g.height(), g.width()),
        }
    }

    pub fn into_f32(self) -> Grid<f32> {
        match self {
            AnyGrid::F32(g) => g,
            AnyGrid::F64(g) => g.cast(),
        }
    }

    pub fn into_f64(self) -> Grid<f64> {
        match self {
            AnyGrid::F32(g) => g.cast(),
            AnyGrid::F64(g) => g,
        }
    }
}

fn dim(n: usize) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("dimension {n} exceeds u32")))
}

pub fn write_fgt<T: Sample, W: Write>(mut w: W, g: &Grid<T>) -> std::io::Result<()> {
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(MAGIC);
    let dims = [g.channels(), g.height(), g.width()].map(|n| dim(n).expect("grid dims fit u32"));
    header[4..8].copy_from_slice(&dims[0]);
    header[8..12].copy_from_slice(&dims[1]);
    header[12..16].copy_from_slice(&dims[2]);
    header[16] = T::DTYPE;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(g.data().len() * if T::DTYPE == 0 { 4 } else { 8 });
    for v in g.data() {
        match T::DTYPE {
            0 => buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
            _ => buf.extend_from_slice(&v.to_f64().to_le_bytes()),
        }
    }
    w.write_all(&buf)
}

/// Reads exactly one tensor from the stream.
pub fn read_fgt<R: Read>(mut r: R) -> Result<AnyGrid> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("truncated FGT1 header: {e}")))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected FGT1".into()));
    }
    let rd = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (rd(4), rd(8), rd(12));
    if header[17..20] != [0, 0, 0] {
        return Err(Error::Format("reserved header bytes are not zero".into()));
    }
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let width = match header[16] {
        0 => 4,
        1 => 8,
        t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
    };
    let mut payload = vec![0u8; n * width];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Format(format!("truncated FGT1 payload: {e}")))?;
    if width == 4 {
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(AnyGrid::F32(Grid::new(c, h, w, data)?))
    } else {
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(AnyGrid::F64(Grid::new(c, h, w, data)?))
    }
}

pub fn save_fgt<T: Sample>(path: impl AsRef<Path>, g: &Grid<T>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_fgt(&mut w, g).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a single-tensor FGT1 file; trailing bytes are an error.
pub fn load_fgt(path: impl AsRef<Path>) -> Result<AnyGrid> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let g = read_fgt(&mut r)?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(g),
        Ok(_) => Err(Error::Format(format!(
            "{}: trailing bytes after FGT1 payload",
            path.display()
        ))),
        Err(e) => Err(Error::io(path, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let g = Grid::<f32>::new(2, 1, 3, vec![1.0, -2.0, 0.5, 3.25, 0.0, 7.0]).unwrap();
        let mut buf = Vec::new();
        write_fgt(&mut buf, &g).unwrap();
        assert_eq!(buf.len(), HEADER_LEN + 6 * 4);
        assert_eq!(&buf[..4], b"FGT1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &3u32.to_le_bytes());
        assert_eq!(&buf[16..20], &[0, 0, 0, 0]);
        assert_eq!(&buf[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&buf[40..44], &7.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_malformed_streams() {
        let g = Grid::<f32>::zeros(1, 2, 2);
        let mut buf = Vec::new();
        write_fgt(&mut buf, &g).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_fgt(&bad[..]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[16] = 9;
        assert!(matches!(read_fgt(&bad[..]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[18] = 1;
        assert!(matches!(read_fgt(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(read_fgt(&buf[..buf.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn trailing_bytes_rejected_on_file_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fgt");
        let g = Grid::<f32>::zeros(1, 2, 2);
        let mut buf = Vec::new();
        write_fgt(&mut buf, &g).unwrap();
        buf.push(0);
        std::fs::write(&path, &buf).unwrap();
        assert!(load_fgt(&path).is_err());
        buf.pop();
        std::fs::write(&path, &buf).unwrap();
        assert_eq!(load_fgt(&path).unwrap(), AnyGrid::F32(g));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            c in 1usize..4, h in 1usize..5, w in 1usize..5,
            seed in prop::collection::vec(-1e30f64..1e30, 64),
        ) {
            let n = c * h * w;
            let g32 = Grid::<f32>::new(c, h, w, seed[..n].iter().map(|v| *v as f32).collect()).unwrap();
            let g64 = Grid::<f64>::new(c, h, w, seed[..n].to_vec()).unwrap();
            let mut b32 = Vec::new();
            write_fgt(&mut b32, &g32).unwrap();
            let mut b64 = Vec::new();
            write_fgt(&mut b64, &g64).unwrap();
            prop_assert_eq!(read_fgt(&b32[..]).unwrap(), AnyGrid::F32(g32));
            prop_assert_eq!(read_fgt(&b64[..]).unwrap(), AnyGrid::F64(g64));
        }
    }
}
