//! Versioned binary model container for autoencoder and NMF checkpoints.
//! All tensors are stored as little-endian f64, so save/load round trips
//! are bit-exact.

use crate::autoencoder::{Activation, AutoencoderModel, Layer};
use crate::error::{Error, Result};
use crate::nmf::NmfModel;
use crate::numerics::Matrix;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SSEPCKP1";

#[derive(Debug, Clone)]
pub enum Checkpoint {
    Autoencoder(AutoencoderModel),
    Nmf(NmfModel),
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_matrix(out: &mut Vec<u8>, m: &Matrix) {
    write_u32(out, m.rows() as u32);
    write_u32(out, m.cols() as u32);
    for &v in m.data() {
        write_f64(out, v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Matrix::from_vec(rows, cols, data)
    }
}

fn encode_activation(a: Activation) -> u8 {
    match a {
        Activation::Sigmoid => 0,
        Activation::Relu => 1,
    }
}

fn decode_activation(b: u8) -> Result<Activation> {
    match b {
        0 => Ok(Activation::Sigmoid),
        1 => Ok(Activation::Relu),
        other => Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
    }
}

fn write_layers(out: &mut Vec<u8>, layers: &[Layer]) {
    write_u32(out, layers.len() as u32);
    for layer in layers {
        out.push(encode_activation(layer.activation));
        write_matrix(out, &layer.weights);
        write_matrix(out, &layer.bias);
    }
}

fn read_layers(r: &mut Reader) -> Result<Vec<Layer>> {
    let count = r.u32()? as usize;
    (0..count)
        .map(|_| {
            let activation = decode_activation(r.u8()?)?;
            let weights = r.matrix()?;
            let bias = r.matrix()?;
            Ok(Layer {
                weights,
                bias,
                activation,
            })
        })
        .collect()
}

pub fn serialize(checkpoint: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    match checkpoint {
        Checkpoint::Autoencoder(m) => {
            out.push(0);
            write_u32(&mut out, m.k as u32);
            write_u32(&mut out, m.context as u32);
            out.push(m.nonneg_decoder as u8);
            write_f64(&mut out, m.eps_kl);
            write_layers(&mut out, &m.encoder);
            write_layers(&mut out, &m.decoder);
        }
        Checkpoint::Nmf(m) => {
            out.push(1);
            write_matrix(&mut out, &m.w);
            write_matrix(&mut out, &m.h);
            write_matrix(&mut out, &m.zero_mask);
        }
    }
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a model container".into()));
    }
    match r.u8()? {
        0 => {
            let k = r.u32()? as usize;
            let context = r.u32()? as usize;
            let nonneg_decoder = r.u8()? != 0;
            let eps_kl = r.f64()?;
            let encoder = read_layers(&mut r)?;
            let decoder = read_layers(&mut r)?;
            if encoder.is_empty() || decoder.is_empty() {
                return Err(Error::Checkpoint("empty layer stack".into()));
            }
            Ok(Checkpoint::Autoencoder(AutoencoderModel {
                encoder,
                decoder,
                k,
                context,
                nonneg_decoder,
                eps_kl,
            }))
        }
        1 => {
            let w = r.matrix()?;
            let h = r.matrix()?;
            let zero_mask = r.matrix()?;
            Ok(Checkpoint::Nmf(NmfModel { w, h, zero_mask }))
        }
        other => Err(Error::Checkpoint(format!("unknown model kind {other}"))),
    }
}

pub fn save(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = serialize(checkpoint);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    deserialize(&bytes)
}
