//! Flat fp32 tensors and the ordered parameter collection, with their
//! canonical byte encoding:
//! `u32 name length | name | u32 rank | rank × u32 extent | f32 LE data`.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{bail, Result};
use crate::wire::{ByteReader, ByteWriter};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking the shape/length agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            bail!(Shape, "zero extent in shape {shape:?}");
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            bail!(Shape, "shape {shape:?} needs {n} elements, got {}", data.len());
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            bail!(NonFinite, "tensor element {i}");
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Tensor::new(alloc::vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        assert!(shape.iter().all(|&d| d > 0), "zero extent in shape");
        Tensor { shape, data: alloc::vec![0.0; n] }
    }

    pub fn scalar(v: f32) -> Result<Self> {
        Tensor::new(alloc::vec![1], alloc::vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable element access. Callers own the finiteness invariant; kernels
    /// check their outputs before handing tensors back.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn encode_into(&self, name: &str, w: &mut ByteWriter) {
        w.str(name);
        w.u32(self.shape.len() as u32);
        for &d in &self.shape {
            w.u32(d as u32);
        }
        w.f32s(&self.data);
    }

    pub fn decode_from(r: &mut ByteReader<'_>) -> Result<(String, Tensor)> {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > r.remaining() / 4 {
            bail!(Decode, "tensor {name}: rank {rank} exceeds buffer");
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            n = match n.checked_mul(d) {
                Some(n) => n,
                None => bail!(Decode, "tensor {name}: element count overflows"),
            };
            shape.push(d);
        }
        if n > r.remaining() / 4 {
            bail!(Decode, "tensor {name}: {n} elements exceed buffer");
        }
        let data = r.f32s(n)?;
        let t = Tensor::new(shape, data).map_err(|e| crate::Error::Decode(alloc::format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

/// Ordered, uniquely named parameter tensors. The order is the canonical
/// serialization and flattening order on every node.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                bail!(Shape, "duplicate parameter name {name}");
            }
        }
        Ok(ModelParams { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape.clone())))
                .collect(),
        }
    }

    /// True when names, order and shapes all agree.
    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape == tb.shape)
    }

    pub fn check_layout(&self, other: &ModelParams, what: &str) -> Result<()> {
        if !self.same_layout(other) {
            bail!(Shape, "{what} does not match the parameter layout");
        }
        Ok(())
    }

    /// Concatenates every tensor in canonical order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` as the layout.
    pub fn unflatten_like(&self, flat: &[f32]) -> Result<ModelParams> {
        if flat.len() != self.numel() {
            bail!(Shape, "flat buffer has {} elements, layout needs {}", flat.len(), self.numel());
        }
        let mut off = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (n, t) in &self.entries {
            let data = flat[off..off + t.len()].to_vec();
            off += t.len();
            let t = Tensor::new(t.shape.clone(), data).map_err(|e| match e {
                crate::Error::NonFinite(_) => crate::Error::NonFinite(n.to_string()),
                other => other,
            })?;
            entries.push((n.clone(), t));
        }
        Ok(ModelParams { entries })
    }

    pub fn encode_into(&self, w: &mut ByteWriter) {
        w.u32(self.entries.len() as u32);
        for (n, t) in &self.entries {
            t.encode_into(n, w);
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(self.numel() * 4 + 64 * self.entries.len());
        self.encode_into(&mut w);
        w.into_inner()
    }

    pub fn decode_from(r: &mut ByteReader<'_>) -> Result<ModelParams> {
        let count = r.u32()? as usize;
        if count > r.remaining() {
            bail!(Decode, "parameter count {count} exceeds buffer");
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            entries.push(Tensor::decode_from(r)?);
        }
        ModelParams::new(entries).map_err(|e| crate::Error::Decode(e.to_string()))
    }

    pub fn decode(buf: &[u8]) -> Result<ModelParams> {
        let mut r = ByteReader::new(buf);
        let p = ModelParams::decode_from(&mut r)?;
        r.finish()?;
        Ok(p)
    }

    /// SHA-256 of the canonical encoding; equal hashes mean bit-identical
    /// parameters (names, shapes and data).
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.encode()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> ModelParams {
        ModelParams::new(vec![
            ("w".into(), Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap()),
            ("b".into(), Tensor::from_vec(vec![0.25]).unwrap()),
        ])
        .unwrap()
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(Tensor::from_vec(vec![1.0, f32::NAN]), Err(crate::Error::NonFinite(_))));
        assert!(Tensor::from_vec(vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn canonical_layout() {
        let p = ModelParams::new(vec![("a".into(), Tensor::from_vec(vec![1.0]).unwrap())]).unwrap();
        let bytes = p.encode();
        let mut expect = vec![1, 0, 0, 0, 1, 0, 0, 0, b'a', 1, 0, 0, 0, 1, 0, 0, 0];
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn roundtrip_and_flatten() {
        let p = sample();
        assert_eq!(ModelParams::decode(&p.encode()).unwrap(), p);
        let flat = p.flatten();
        assert_eq!(flat, vec![1.0, -2.0, 3.5, 0.0, 0.25]);
        assert_eq!(p.unflatten_like(&flat).unwrap(), p);
        assert!(p.unflatten_like(&flat[1..]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::from_vec(vec![1.0]).unwrap();
        assert!(ModelParams::new(vec![("x".into(), t.clone()), ("x".into(), t)]).is_err());
    }

    #[test]
    fn decode_rejects_garbage() {
        let bytes = sample().encode();
        for cut in 0..bytes.len() {
            assert!(ModelParams::decode(&bytes[..cut]).is_err());
        }
        let mut huge = vec![1, 0, 0, 0, 0, 0, 0, 0, 4, 0, 0, 0];
        huge.extend_from_slice(&[0xff; 16]);
        assert!(ModelParams::decode(&huge).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let p = sample();
        let mut q = p.clone();
        assert_eq!(p.content_hash(), q.content_hash());
        q.entries_mut().next().unwrap().1.data_mut()[0] = 1.0000001;
        assert_ne!(p.content_hash(), q.content_hash());
    }
}
