//! `MFFW` checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! | bytes            | content                                              |
//! |------------------|------------------------------------------------------|
//! | 0–3              | magic `MFFW`                                         |
//! | 4                | version (1)                                          |
//! | 5–7              | reserved, zero                                       |
//! | 8–11             | entry count `n` (u32)                                |
//! | manifest         | `n` × { name len u16, name utf-8, rank u8, dims u32 × rank, offset u64 } |
//! | next 8           | payload length in values (u64)                       |
//! | payload          | f32 values; an entry occupies `offset .. offset + product(dims)` |
//!
//! Entries include the network configuration (`config.*`), every parameter
//! and BN running statistic, and optionally Adam state (`adam.*`). Configuration
//! scalars and the Adam step count are stored as four 16-bit words each so they
//! survive the `f32` payload exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::adam::{Adam, AdamConfig};
use super::network::{MffNet, NetworkConfig};
use super::{NnError, Parameters, Real};

pub const MAGIC: [u8; 4] = *b"MFFW";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after checkpoint payload")]
    TrailingBytes(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint lacks tensor {0}")]
    Missing(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Network(#[from] NnError),
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Tensors = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Encodes a `u64` as four 16-bit words, each exactly representable in `f32`.
fn words(bits: u64) -> [f32; 4] {
    [0, 1, 2, 3].map(|i| ((bits >> (48 - 16 * i)) & 0xFFFF) as f32)
}

fn unwords(w: &[f32]) -> Result<u64, CheckpointError> {
    w.iter().try_fold(0u64, |acc, &v| {
        if !(0.0..=65535.0).contains(&v) || v.fract() != 0.0 {
            return Err(CheckpointError::Malformed(format!("{v} is not a 16-bit word")));
        }
        Ok((acc << 16) | v as u64)
    })
}

/// Exact `f64` scalars stored as 16-bit words.
fn exact(values: &[f64]) -> Vec<f32> {
    values.iter().flat_map(|v| words(v.to_bits())).collect()
}

fn unexact(w: &[f32]) -> Result<Vec<f64>, CheckpointError> {
    w.chunks(4).map(|c| unwords(c).map(f64::from_bits)).collect()
}

fn to_f32<T: Real>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.f64() as f32).collect()
}

/// Serializes a network and, optionally, its optimizer state.
pub fn encode_checkpoint<T: Real>(net: &MffNet<T>, adam: Option<&Adam>) -> Vec<u8> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    let c = &net.config;
    entries.push(("config.channels".into(), vec![7], c.channel_plan().iter().map(|&v| v as f32).collect()));
    entries.push(("config.lambda".into(), vec![2, 4], exact(&c.lambda)));
    entries.push(("config.bn".into(), vec![2, 4], exact(&[c.bn_eps, c.bn_momentum])));
    net.clone().visit_params(&mut |name, p, _| entries.push((name.to_string(), p.shape.clone(), to_f32(&p.value))));
    if let Some(adam) = adam {
        let AdamConfig { lr, beta1, beta2, eps } = adam.config;
        entries.push(("adam.config".into(), vec![4, 4], exact(&[lr, beta1, beta2, eps])));
        entries.push(("adam.step".into(), vec![4], words(adam.step).to_vec()));
        for (name, (m, v)) in &adam.moments {
            entries.push((format!("adam.m.{name}"), vec![m.len()], m.iter().map(|&x| x as f32).collect()));
            entries.push((format!("adam.v.{name}"), vec![v.len()], v.iter().map(|&x| x as f32).collect()));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, 0, 0, 0]);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, shape, values) in &entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += values.len() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, _, values) in &entries {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse(bytes: &[u8]) -> Result<Tensors, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    r.take(3)?;
    let n = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let offset = r.u64()?;
        manifest.push((name, shape, offset));
    }
    let total = r.u64()?;
    let payload_bytes = total.checked_mul(4).ok_or(CheckpointError::Truncated)? as usize;
    let payload: Vec<f32> = r
        .take(payload_bytes)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    let mut tensors = Tensors::new();
    for (name, shape, offset) in manifest {
        let len: usize = shape.iter().product();
        let start = offset as usize;
        let values = start
            .checked_add(len)
            .and_then(|end| payload.get(start..end))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} lies outside the payload")))?;
        if tensors.insert(name.clone(), (shape, values.to_vec())).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
        }
    }
    Ok(tensors)
}

fn take_tensor(tensors: &mut Tensors, name: &str, shape: &[usize]) -> Result<Vec<f32>, CheckpointError> {
    let (found, values) = tensors.remove(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
    if found != shape {
        return Err(CheckpointError::ShapeMismatch { name: name.to_string(), expected: shape.to_vec(), found });
    }
    Ok(values)
}

/// Restores a network (and Adam state when present).
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(MffNet<T>, Option<Adam>), CheckpointError> {
    let mut tensors = parse(bytes)?;
    let plan = take_tensor(&mut tensors, "config.channels", &[7])?;
    let lambda = unexact(&take_tensor(&mut tensors, "config.lambda", &[2, 4])?)?;
    let bn = unexact(&take_tensor(&mut tensors, "config.bn", &[2, 4])?)?;
    let mut plan_usize = [0usize; 7];
    for (dst, &v) in plan_usize.iter_mut().zip(&plan) {
        if !(v >= 0.0 && v.fract() == 0.0) {
            return Err(CheckpointError::Malformed(format!("channel plan entry {v} is not a count")));
        }
        *dst = v as usize;
    }
    let mut config = NetworkConfig::from_channel_plan(plan_usize, [lambda[0], lambda[1]]);
    config.bn_eps = bn[0];
    config.bn_momentum = bn[1];
    let mut net = MffNet::<T>::new(config, 0)?;
    let mut result = Ok(());
    net.visit_params(&mut |name, p, _| {
        if result.is_err() {
            return;
        }
        match take_tensor(&mut tensors, name, &p.shape) {
            Ok(values) => p.value = values.iter().map(|&v| T::of(v as f64)).collect(),
            Err(e) => result = Err(e),
        }
    });
    result?;

    let adam = match tensors.contains_key("adam.config") {
        false => None,
        true => {
            let c = unexact(&take_tensor(&mut tensors, "adam.config", &[4, 4])?)?;
            let mut adam = Adam::new(AdamConfig { lr: c[0], beta1: c[1], beta2: c[2], eps: c[3] });
            adam.step = unwords(&take_tensor(&mut tensors, "adam.step", &[4])?)?;
            let names: Vec<String> =
                tensors.keys().filter_map(|k| k.strip_prefix("adam.m.")).map(str::to_string).collect();
            for name in names {
                let (shape, m) = tensors.remove(&format!("adam.m.{name}")).unwrap();
                let v = take_tensor(&mut tensors, &format!("adam.v.{name}"), &shape)?;
                let widen = |x: Vec<f32>| x.into_iter().map(f64::from).collect::<Vec<_>>();
                adam.moments.insert(name, (widen(m), widen(v)));
            }
            Some(adam)
        }
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::Malformed(format!("unexpected tensor {extra}")));
    }
    Ok((net, adam))
}

pub fn write_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    net: &MffNet<T>,
    adam: Option<&Adam>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(net, adam))
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn read_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(MffNet<T>, Option<Adam>), CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn3d::{Mode, Tensor4};

    #[test]
    fn round_trip_with_running_stats_and_adam() {
        let mut net = MffNet::<f32>::new(NetworkConfig::reduced(), 3).unwrap();
        let x = Tensor4::from_fn([1, 8, 8, 8], |_, z, y, x| (z * y + x) as f32 * 0.01);
        net.forward(vec![x.clone(), x], Mode::Train).unwrap();
        let g = || vec![Tensor4::full([1, 8, 8, 8], 0.1f32); 2];
        net.backward(g(), vec![g(), g()]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut net);

        let bytes = encode_checkpoint(&net, Some(&adam));
        let (back, back_adam) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(back, net);
        let back_adam = back_adam.unwrap();
        assert_eq!(back_adam.step, 1);
        assert_eq!(back_adam.moments.len(), adam.moments.len());
        assert_eq!(encode_checkpoint(&back, Some(&back_adam)), bytes);

        let (_, none) = decode_checkpoint::<f32>(&encode_checkpoint(&net, None)).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn malformed_inputs() {
        let net = MffNet::<f32>::new(NetworkConfig::reduced(), 3).unwrap();
        let bytes = encode_checkpoint(&net, None);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(CheckpointError::UnsupportedVersion(9))));
        assert!(matches!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated)));
        let mut bad = bytes;
        bad.push(0);
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(CheckpointError::TrailingBytes(1))));
    }
}
