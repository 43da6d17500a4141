//! Binary model checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic       8 bytes  "BDPRCKPT"
//! version     u32      currently 1
//! classes     u32
//! rank        u32, then `rank` input extents
//! layers      u32 count, then per layer a kind byte and its descriptor:
//!               1 dense     in, out
//!               2 conv2d    in, out, kernel, stride, padding
//!               3 batchnorm channels, eps (f32), momentum (f32)
//!               4 relu
//!               5 maxpool   size
//!               6 flatten
//! tensors     per layer in order (dense/conv: weight, bias;
//!             batchnorm: gamma, beta, running mean, running var),
//!             each as u32 element count + row-major f32 values
//! mask        u32 neuron count + ceil(n/8) bytes, bit i (LSB first) set
//!             when neuron i is alive
//! checksum    CRC-32 (IEEE) of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::layer::{BatchNorm, Conv2d, Dense, Layer};
use super::model::Model;
use crate::error::{CheckpointError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BDPRCKPT";
pub const VERSION: u32 = 1;

const DENSE: u8 = 1;
const CONV: u8 = 2;
const BN: u8 = 3;
const RELU: u8 = 4;
const POOL: u8 = 5;
const FLATTEN: u8 = 6;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u32(t.len());
        for &v in t.data() {
            self.f32(v);
        }
    }
}

pub fn encode(model: &Model<f32>) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION as usize);
    w.u32(model.class_count());
    w.u32(model.input_shape().len());
    for &d in model.input_shape() {
        w.u32(d);
    }
    w.u32(model.layers().len());
    for layer in model.layers() {
        match layer {
            Layer::Dense(d) => {
                w.0.push(DENSE);
                w.u32(d.in_features());
                w.u32(d.out_features());
            }
            Layer::Conv2d(c) => {
                w.0.push(CONV);
                w.u32(c.in_channels());
                w.u32(c.out_channels());
                w.u32(c.kernel());
                w.u32(c.stride);
                w.u32(c.padding);
            }
            Layer::BatchNorm(b) => {
                w.0.push(BN);
                w.u32(b.channels());
                w.f32(b.eps);
                w.f32(b.momentum);
            }
            Layer::Relu => w.0.push(RELU),
            Layer::MaxPool { size } => {
                w.0.push(POOL);
                w.u32(*size);
            }
            Layer::Flatten => w.0.push(FLATTEN),
        }
    }
    for layer in model.layers() {
        match layer {
            Layer::Dense(d) => {
                w.tensor(&d.weight);
                w.tensor(&d.bias);
            }
            Layer::Conv2d(c) => {
                w.tensor(&c.weight);
                w.tensor(&c.bias);
            }
            Layer::BatchNorm(b) => {
                w.tensor(&b.gamma);
                w.tensor(&b.beta);
                w.tensor(&b.running_mean);
                w.tensor(&b.running_var);
            }
            _ => {}
        }
    }
    let alive = model.alive_flags();
    w.u32(alive.len());
    let mut bits = vec![0u8; alive.len().div_ceil(8)];
    for (i, _) in alive.iter().enumerate().filter(|(_, a)| **a) {
        bits[i / 8] |= 1 << (i % 8);
    }
    w.0.extend_from_slice(&bits);
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| malformed(format!("unexpected end at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f32>, CheckpointError> {
        let n = self.u32()?;
        let want: usize = shape.iter().product();
        if n != want {
            return Err(malformed(format!("tensor {shape:?} stored with {n} values")));
        }
        let raw = self.take(4 * n)?;
        let data = raw
            .chunks(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| malformed(e.to_string()))
    }
}

enum Desc {
    Dense(usize, usize),
    Conv(usize, usize, usize, usize, usize),
    Bn(usize, f32, f32),
    Relu,
    Pool(usize),
    Flatten,
}

pub fn decode(bytes: &[u8]) -> Result<Model<f32>> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CheckpointError::TooShort(bytes.len()).into());
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed }.into());
    }
    let mut r = Reader { buf: body, pos: 12 };
    let classes = r.u32()?;
    let rank = r.u32()?;
    if rank == 0 || rank > 8 {
        return Err(malformed(format!("input rank {rank}")).into());
    }
    let input: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_, _>>()?;
    let count = r.u32()?;
    let mut descs = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        descs.push(match r.u8()? {
            DENSE => Desc::Dense(r.u32()?, r.u32()?),
            CONV => Desc::Conv(r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?),
            BN => Desc::Bn(r.u32()?, r.f32()?, r.f32()?),
            RELU => Desc::Relu,
            POOL => Desc::Pool(r.u32()?),
            FLATTEN => Desc::Flatten,
            other => return Err(malformed(format!("unknown layer kind {other}")).into()),
        });
    }
    let mut layers = Vec::with_capacity(descs.len());
    for d in descs {
        layers.push(match d {
            Desc::Dense(i, o) => Layer::Dense(Dense {
                weight: r.tensor(&[o, i])?,
                bias: r.tensor(&[o])?,
            }),
            Desc::Conv(i, o, k, stride, padding) => Layer::Conv2d(Conv2d {
                weight: r.tensor(&[o, i, k, k])?,
                bias: r.tensor(&[o])?,
                stride,
                padding,
            }),
            Desc::Bn(c, eps, momentum) => Layer::BatchNorm(BatchNorm {
                gamma: r.tensor(&[c])?,
                beta: r.tensor(&[c])?,
                running_mean: r.tensor(&[c])?,
                running_var: r.tensor(&[c])?,
                momentum,
                eps,
            }),
            Desc::Relu => Layer::Relu,
            Desc::Pool(size) => Layer::MaxPool { size },
            Desc::Flatten => Layer::Flatten,
        });
    }
    let mut model = Model::new(input, layers, classes)
        .map_err(|e| malformed(format!("invalid architecture: {e}")))?;
    let n = r.u32()?;
    if n != model.neuron_count() {
        return Err(malformed(format!(
            "mask covers {n} neurons, model has {}",
            model.neuron_count()
        ))
        .into());
    }
    let bits = r.take(n.div_ceil(8))?;
    let alive: Vec<bool> = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
    model.set_alive_flags(&alive)?;
    if r.pos != body.len() {
        return Err(malformed(format!("{} trailing bytes", body.len() - r.pos)).into());
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::nn::NeuronId;

    fn cause(r: Result<Model<f32>>) -> CheckpointError {
        match r {
            Err(Error::Checkpoint(c)) => c,
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn bytes_are_stable_through_decode() {
        let m = Model::reference([3, 16, 16], 10, 7)
            .unwrap()
            .apply_prune_mask(&[NeuronId::new(4, 3), NeuronId::new(9, 63)])
            .unwrap();
        let a = encode(&m);
        let back = decode(&a).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back), a);
    }

    #[test]
    fn specific_failure_causes() {
        let m = Model::reference([1, 8, 8], 3, 0).unwrap();
        let good = encode(&m);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(cause(decode(&bad)), CheckpointError::BadMagic);

        let mut bad = good.clone();
        bad[8] = 9;
        assert_eq!(cause(decode(&bad)), CheckpointError::UnsupportedVersion(9));

        let truncated = &good[..good.len() - 100];
        assert!(matches!(
            cause(decode(truncated)),
            CheckpointError::ChecksumMismatch { .. }
        ));

        let mut flipped = good.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x10;
        assert!(matches!(
            cause(decode(&flipped)),
            CheckpointError::ChecksumMismatch { .. }
        ));

        assert!(matches!(cause(decode(&good[..10])), CheckpointError::TooShort(10)));
    }
}
