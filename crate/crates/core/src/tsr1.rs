//! `TSR1` binary tensor files: magic `TSR1`, little-endian `u32` rank, `rank`
//! little-endian `u32` dims, then the `f32` little-endian row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TSR1";

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut words = bytes.get(4..).unwrap_or_default().chunks_exact(4).map(|c| {
        u32::from_le_bytes([c[0], c[1], c[2], c[3]])
    });
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing TSR1 header".into()));
    }
    let rank = words.next().unwrap() as usize;
    if rank == 0 || bytes.len() < 8 + 4 * rank {
        return Err(bad(format!("truncated header (rank {rank})")));
    }
    let shape: Vec<usize> = words.by_ref().take(rank).map(|d| d as usize).collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[8 + 4 * rank..];
    if payload.len() != 4 * n {
        return Err(bad(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(t)).map_err(io_err(path))
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0f32, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"TSR1");
        assert_eq!(&b[4..8], &[2, 0, 0, 0]);
        assert_eq!(&b[8..16], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn rejects_corrupt_input() {
        let p = Path::new("x.tsr1");
        assert!(decode(b"TSR2\x01\0\0\0\x01\0\0\0\0\0\0\0", p).is_err());
        assert!(decode(b"TSR1\x01\0\0\0\x02\0\0\0\0\0\0\0", p).is_err());
        assert!(decode(b"TSR1", p).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode(&encode(&t), Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
