//! Little-endian binary checkpoints.
//!
//! Layout: `IPTCKPT1`, u32 tensor count, then per tensor a u16 name length,
//! the UTF-8 name, a u8 rank, `rank` u32 dims and the row-major f32 payload,
//! then a u64 iteration counter. Adam moments of parameter `p` are stored as
//! `p/m1` and `p/m2`; batch-norm running statistics are stored under their
//! buffer names.

use std::collections::HashMap;
use std::path::Path;

use super::optim::OptimState;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{IncepFormer, ParameterStore};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"IPTCKPT1";
pub const FIRST_MOMENT_SUFFIX: &str = "/m1";
pub const SECOND_MOMENT_SUFFIX: &str = "/m2";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub iteration: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Truncated(what()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: impl FnOnce() -> String) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: usize = self
            .tensors
            .iter()
            .map(|(n, t)| 7 + n.len() + 4 * (t.rank() + t.numel()))
            .sum();
        let mut out = Vec::with_capacity(20 + payload);
        out.extend_from_slice(MAGIC);
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Contract("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Contract(format!("tensor name longer than 65535 bytes: {name:.40}…")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Contract(format!("`{name}` has rank above 255")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Contract(format!("`{name}` has a dim above u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.iteration.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() {
            return Err(CheckpointError::Truncated("magic".into()).into());
        }
        if r.take(MAGIC.len(), String::new)? != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let count = u32::from_le_bytes(r.array(|| "tensor count".into())?);
        let mut tensors = Vec::new();
        for i in 0..count {
            let len = u16::from_le_bytes(r.array(|| format!("name length of tensor {i}"))?);
            let name = std::str::from_utf8(r.take(len as usize, || format!("name of tensor {i}"))?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let [rank] = r.array(|| format!("rank of `{name}`"))?;
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.array(|| format!("shape of `{name}`"))?) as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = numel.and_then(|n| n.checked_mul(4)).unwrap_or(usize::MAX);
            let raw = r.take(bytes, || format!("payload of `{name}`"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            tensors.push((name, Tensor::from_parts(shape, data)));
        }
        let iteration = u64::from_le_bytes(r.array(|| "iteration counter".into())?);
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                what: "checkpoint".into(),
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint { tensors, iteration })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Parameters, buffers and, when given, optimizer moments.
    pub fn capture<T: Scalar>(model: &IncepFormer<T>, optim: Option<&OptimState<T>>, iteration: u64) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
        let store = |s: &ParameterStore<T>, out: &mut Vec<(String, Tensor<f32>)>| {
            out.extend(s.iter().map(|(n, t)| (n.to_string(), t.cast())));
        };
        store(model.params(), &mut tensors);
        store(model.buffers(), &mut tensors);
        if let Some(o) = optim {
            for (i, name) in model.params().names().enumerate() {
                tensors.push((format!("{name}{FIRST_MOMENT_SUFFIX}"), o.first[i].cast()));
                tensors.push((format!("{name}{SECOND_MOMENT_SUFFIX}"), o.second[i].cast()));
            }
        }
        Checkpoint { tensors, iteration }
    }

    /// Checks every tensor against the model before touching it.
    fn check<T: Scalar>(&self, model: &IncepFormer<T>, with_moments: bool) -> Result<()> {
        let mut expected: Vec<(String, &[usize])> = Vec::new();
        for s in [model.params(), model.buffers()] {
            expected.extend(s.iter().map(|(n, t)| (n.to_string(), t.shape())));
        }
        let mut moments = Vec::new();
        for (n, t) in model.params().iter() {
            moments.push((format!("{n}{FIRST_MOMENT_SUFFIX}"), t.shape()));
            moments.push((format!("{n}{SECOND_MOMENT_SUFFIX}"), t.shape()));
        }
        let is_moment = |n: &str| n.ends_with(FIRST_MOMENT_SUFFIX) || n.ends_with(SECOND_MOMENT_SUFFIX);
        let known: HashMap<&str, &[usize]> = expected.iter().chain(&moments).map(|(n, s)| (n.as_str(), *s)).collect();
        for (name, t) in &self.tensors {
            match known.get(name.as_str()) {
                Some(&shape) if shape != t.shape() => {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.to_vec(),
                        found: t.shape().to_vec(),
                    }
                    .into())
                }
                Some(_) => {}
                None if !with_moments && is_moment(name) => {}
                None => return Err(CheckpointError::UnexpectedTensor(name.clone()).into()),
            }
        }
        let present: HashMap<&str, ()> = self.tensors.iter().map(|(n, _)| (n.as_str(), ())).collect();
        let required = expected.iter().chain(if with_moments { &moments[..] } else { &[] });
        if let Some((missing, _)) = required.into_iter().find(|(n, _)| !present.contains_key(n.as_str())) {
            return Err(CheckpointError::MissingTensor(missing.clone()).into());
        }
        Ok(())
    }

    /// Loads parameters and buffers; optimizer moments are ignored.
    pub fn restore_weights<T: Scalar>(&self, model: &mut IncepFormer<T>) -> Result<()> {
        self.check(model, false)?;
        self.write_weights(model);
        Ok(())
    }

    /// Loads parameters, buffers and optimizer state. The returned state's
    /// step equals the stored iteration.
    pub fn restore<T: Scalar>(&self, model: &mut IncepFormer<T>) -> Result<OptimState<T>> {
        self.check(model, true)?;
        self.write_weights(model);
        let moment = |n: &str, suffix: &str| self.get(&format!("{n}{suffix}")).expect("checked").cast();
        let names: Vec<String> = model.params().names().map(str::to_string).collect();
        Ok(OptimState {
            first: names.iter().map(|n| moment(n, FIRST_MOMENT_SUFFIX)).collect(),
            second: names.iter().map(|n| moment(n, SECOND_MOMENT_SUFFIX)).collect(),
            step: self.iteration,
        })
    }

    fn write_weights<T: Scalar>(&self, model: &mut IncepFormer<T>) {
        for (name, t) in &self.tensors {
            if let Some(slot) = model.params_mut().by_name_mut(name) {
                *slot = t.cast();
            } else if let Some(slot) = model.buffers_mut().by_name_mut(name) {
                *slot = t.cast();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                (
                    "a/weight".into(),
                    Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap(),
                ),
                ("b".into(), Tensor::scalar(7.25)),
            ],
            iteration: 42,
        }
    }

    #[test]
    fn byte_layout() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..8], b"IPTCKPT1");
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..14], &8u16.to_le_bytes());
        assert_eq!(&b[14..22], b"a/weight");
        assert_eq!(b[22], 2);
        assert_eq!(&b[23..31], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&b[31..35], &1.0f32.to_le_bytes());
        assert_eq!(&b[b.len() - 8..], &42u64.to_le_bytes());
        assert_eq!(b.len(), 8 + 4 + (2 + 8 + 1 + 8 + 24) + (2 + 1 + 1 + 4) + 8);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.iteration, 42);
        for ((n0, t0), (n1, t1)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t0), bits(t1));
        }
    }

    #[test]
    fn corrupt_inputs() {
        let b = sample().to_bytes().unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::BadMagic))
        ));
        for cut in [3, 10, 20, 40, b.len() - 1] {
            assert!(
                matches!(
                    Checkpoint::from_bytes(&b[..cut]),
                    Err(Error::Checkpoint(CheckpointError::Truncated(_)))
                ),
                "cut at {cut}"
            );
        }
        let mut long = b.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
