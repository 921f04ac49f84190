//! Flat model parameter vectors.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &ParamVector) {
        debug_assert_eq!(self.len(), x.len());
        for (s, v) in self.0.iter_mut().zip(&x.0) {
            *s += a * v;
        }
    }

    pub fn scaled(&self, a: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| a * v).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `Σ_k weights[k] * vectors[k]`, summed in the given order. The
    /// accumulator starts from the first term so a single unit weight
    /// reproduces its vector bit for bit.
    pub fn weighted_sum<'a, I>(terms: I) -> Option<ParamVector>
    where
        I: IntoIterator<Item = (f64, &'a ParamVector)>,
    {
        let mut iter = terms.into_iter();
        let (w0, v0) = iter.next()?;
        let mut acc = v0.scaled(w0);
        for (w, v) in iter {
            acc.axpy(w, v);
        }
        Some(acc)
    }

    /// Length-prefixed little-endian encoding: `u64` count then `f64`s.
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.0.len() as u64).to_le_bytes());
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Decodes one vector from the front of `bytes`, returning it and the
    /// unread remainder.
    pub fn decode(bytes: &[u8]) -> Result<(ParamVector, &[u8])> {
        let (len, rest) = take_u64(bytes)?;
        let len = usize::try_from(len)
            .map_err(|_| Error::Checkpoint("vector length overflows usize".into()))?;
        let need = len
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint("vector length overflows".into()))?;
        if rest.len() < need {
            return Err(Error::Checkpoint(format!(
                "truncated vector: need {need} bytes, have {}",
                rest.len()
            )));
        }
        let values = rest[..need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok((ParamVector(values), &rest[need..]))
    }
}

pub(crate) fn take_u64(bytes: &[u8]) -> Result<(u64, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("truncated integer".into()));
    }
    let (head, rest) = bytes.split_at(8);
    Ok((u64::from_le_bytes(head.try_into().expect("8 bytes")), rest))
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wire_format_layout() {
        let mut buf = Vec::new();
        ParamVector::new(vec![1.0, -2.5]).encode(&mut buf);
        assert_eq!(&buf[..8], &2u64.to_le_bytes());
        assert_eq!(&buf[8..16], &1.0f64.to_le_bytes());
        assert_eq!(&buf[16..], &(-2.5f64).to_le_bytes());
    }

    #[test]
    fn truncated_input_is_rejected() {
        let mut buf = Vec::new();
        ParamVector::new(vec![1.0, 2.0]).encode(&mut buf);
        assert!(ParamVector::decode(&buf[..buf.len() - 1]).is_err());
        assert!(ParamVector::decode(&buf[..4]).is_err());
    }

    #[test]
    fn single_unit_weight_is_exact() {
        let v = ParamVector::new(vec![0.1, -0.0, 3.3e-300]);
        let out = ParamVector::weighted_sum([(1.0, &v)]).unwrap();
        assert_eq!(
            out.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(values in proptest::collection::vec(any::<f64>(), 0..40)) {
            let v = ParamVector::new(values);
            let mut buf = Vec::new();
            v.encode(&mut buf);
            buf.push(0xAB);
            let (back, rest) = ParamVector::decode(&buf).unwrap();
            prop_assert_eq!(rest, &[0xAB][..]);
            let bits = |p: &ParamVector| p.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&v));
        }
    }
}
