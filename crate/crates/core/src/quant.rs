//! Uniform 256-bucket codebook quantizer with 6σ clipping.
//!
//! Each chunk is summarised by its own mean μ and population standard
//! deviation σ. Values are clipped to `[μ − 6σ, μ + 6σ]`, split into 256
//! equal-width buckets, and every bucket is represented by the mean of the
//! values that fell into it. Statistics and bucket arithmetic run in f64;
//! the codebook is stored as f32.
//!
//! Wire layout: `u32 LE count | 256 × f32 LE codebook | count × u8 index`.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;
use crate::wire::{ByteReader, ByteWriter};

pub const BUCKETS: usize = 256;
pub const CLIP_SIGMAS: f64 = 6.0;
/// Encoded size of a chunk without its indices.
pub const HEADER_BYTES: usize = 4 + BUCKETS * 4;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantChunk {
    codebook: [f32; BUCKETS],
    indices: Vec<u8>,
}

/// Chunk statistics in the precision they are computed in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(values: &[f32]) -> Stats {
        let n = values.len() as f64;
        let mean = values.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = values.iter().map(|&x| (x as f64 - mean) * (x as f64 - mean)).sum::<f64>() / n;
        Stats { mean, std: libm::sqrt(var) }
    }

    pub fn lo(&self) -> f64 {
        self.mean - CLIP_SIGMAS * self.std
    }

    pub fn hi(&self) -> f64 {
        self.mean + CLIP_SIGMAS * self.std
    }

    pub fn bucket_width(&self) -> f64 {
        2.0 * CLIP_SIGMAS * self.std / BUCKETS as f64
    }
}

pub fn quantize(values: &[f32]) -> Result<QuantChunk> {
    if values.is_empty() {
        bail!(Shape, "cannot quantize an empty chunk");
    }
    if let Some(i) = values.iter().position(|x| !x.is_finite()) {
        bail!(NonFinite, "quantizer input element {i}");
    }
    if values.len() > u32::MAX as usize {
        bail!(Range, "chunk of {} elements too large", values.len());
    }
    let st = Stats::of(values);
    if st.std == 0.0 {
        return Ok(QuantChunk { codebook: [st.mean as f32; BUCKETS], indices: alloc::vec![0; values.len()] });
    }
    let (lo, hi, w) = (st.lo(), st.hi(), st.bucket_width());
    let mut sums = [0.0f64; BUCKETS];
    let mut counts = [0u32; BUCKETS];
    let mut indices = Vec::with_capacity(values.len());
    for &x in values {
        let c = (x as f64).clamp(lo, hi);
        // Edges belong to the bucket above; the top edge folds into 255.
        let b = (libm::floor((c - lo) / w) as i64).clamp(0, BUCKETS as i64 - 1) as usize;
        sums[b] += c;
        counts[b] += 1;
        indices.push(b as u8);
    }
    let mut codebook = [0.0f32; BUCKETS];
    for b in 0..BUCKETS {
        codebook[b] = if counts[b] > 0 {
            (sums[b] / counts[b] as f64) as f32
        } else {
            (lo + (b as f64 + 0.5) * w) as f32
        };
    }
    Ok(QuantChunk { codebook, indices })
}

pub fn quantize_tensor(t: &Tensor) -> Result<QuantChunk> {
    quantize(t.data())
}

impl QuantChunk {
    pub fn new(codebook: [f32; BUCKETS], indices: Vec<u8>) -> Result<Self> {
        check_codebook(&codebook)?;
        Ok(QuantChunk { codebook, indices })
    }

    pub fn codebook(&self) -> &[f32; BUCKETS] {
        &self.codebook
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn dequantize(&self) -> Vec<f32> {
        self.indices.iter().map(|&i| self.codebook[i as usize]).collect()
    }

    pub fn dequantize_into(&self, out: &mut [f32]) -> Result<()> {
        if out.len() != self.indices.len() {
            bail!(Shape, "dequantize into {} slots, chunk has {}", out.len(), self.indices.len());
        }
        for (o, &i) in out.iter_mut().zip(&self.indices) {
            *o = self.codebook[i as usize];
        }
        Ok(())
    }

    pub fn dequantize_tensor(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.dequantize())
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.indices.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(self.encoded_len());
        w.u32(self.indices.len() as u32);
        w.f32s(&self.codebook);
        w.bytes(&self.indices);
        w.into_inner()
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        let count = r.u32()? as usize;
        if buf.len() < HEADER_BYTES || buf.len() - HEADER_BYTES != count {
            bail!(Decode, "quantized chunk declares {count} indices in a {}-byte buffer", buf.len());
        }
        let mut codebook = [0.0f32; BUCKETS];
        for c in codebook.iter_mut() {
            *c = r.f32()?;
        }
        check_codebook(&codebook).map_err(|e| crate::Error::Decode(alloc::format!("{e}")))?;
        let indices = r.bytes(count)?.to_vec();
        Ok(QuantChunk { codebook, indices })
    }
}

fn check_codebook(cb: &[f32; BUCKETS]) -> Result<()> {
    if cb.iter().any(|x| !x.is_finite()) {
        bail!(NonFinite, "codebook");
    }
    if cb.windows(2).any(|p| p[0] > p[1]) {
        bail!(Range, "codebook is not nondecreasing");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn constant_chunk_is_exact() {
        let q = quantize(&[5.0; 4]).unwrap();
        assert!(q.indices().iter().all(|&i| i == 0));
        assert_eq!(q.dequantize(), vec![5.0; 4]);
        let q = quantize(&[-0.3]).unwrap();
        assert_eq!(q.dequantize(), vec![-0.3]);
    }

    #[test]
    fn two_point_example() {
        let q = quantize(&[-1.0, 1.0]).unwrap();
        assert_eq!(q.indices(), &[106, 149]);
        assert_eq!(q.codebook()[106], -1.0);
        assert_eq!(q.codebook()[149], 1.0);
        assert_eq!(q.dequantize(), vec![-1.0, 1.0]);
    }

    #[test]
    fn clipping_and_top_edge() {
        // One far outlier: it is clipped to μ+6σ and lands in bucket 255.
        let mut v = vec![0.0f32; 999];
        v.push(1e6);
        let st = Stats::of(&v);
        let q = quantize(&v).unwrap();
        assert_eq!(q.indices()[999], 255);
        assert!(q.codebook()[255] <= st.hi() as f32);
    }

    #[test]
    fn errors() {
        assert!(quantize(&[]).is_err());
        assert!(matches!(quantize(&[1.0, f32::NAN]), Err(crate::Error::NonFinite(_))));
        let mut out = [0.0; 3];
        assert!(quantize(&[1.0, 2.0]).unwrap().dequantize_into(&mut out).is_err());
    }

    #[test]
    fn wire_roundtrip_and_length_check() {
        let q = quantize(&[0.5, -2.0, 3.0, 7.0, 7.0]).unwrap();
        let b = q.encode();
        assert_eq!(b.len(), HEADER_BYTES + 5);
        assert_eq!(QuantChunk::decode(&b).unwrap(), q);
        assert!(QuantChunk::decode(&b[..b.len() - 1]).is_err());
        let mut longer = b.clone();
        longer.push(0);
        assert!(QuantChunk::decode(&longer).is_err());
        let mut nan = b;
        nan[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(QuantChunk::decode(&nan).is_err());
    }
}
