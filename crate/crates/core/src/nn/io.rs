//! `SPLITNN1` model files.
//!
//! ```text
//! "SPLITNN1" | u32 version | u32 in_channels, in_rows, in_cols | u32 layer_count
//! per layer:
//!   u8 kind (0 conv, 1 pool, 2 fc) | u8 activation (0 none, 1 relu, 2 softmax)
//!   dims (u32): conv: in_ch, out_ch, kernel, rows, cols | pool: ch, rows, cols | fc: in, out
//!   u32 n_weights | f32 x n_weights | u32 n_bias | f32 x n_bias
//!   mask bitmap, weights then biases, ceil((n_weights + n_bias) / 8) bytes
//!   u32 n_units | alive bitmap, ceil(n_units / 8) bytes
//! u32 CRC32 (IEEE) of every preceding byte
//! ```
//! Integers and floats are little-endian; bitmaps are LSB-first.

use std::fs;
use std::path::Path;

use super::{
    Activation, ConvGeom, LayerKind, LayerMask, LayerParams, LayerSpec, ModelError, ModelGraph, PoolGeom, Shape,
};

pub const MAGIC: &[u8; 8] = b"SPLITNN1";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_bits<'a>(out: &mut Vec<u8>, bits: impl Iterator<Item = &'a bool>) {
    let mut byte = 0u8;
    let mut n = 0;
    for &b in bits {
        if b {
            byte |= 1 << (n % 8);
        }
        n += 1;
        if n % 8 == 0 {
            out.push(byte);
            byte = 0;
        }
    }
    if n % 8 != 0 {
        out.push(byte);
    }
}

pub fn encode(model: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + model.param_count() * 5);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let input = model.input_shape();
    for v in [input.channels, input.rows, input.cols, model.depth()] {
        put_u32(&mut out, v);
    }
    for (l, spec) in model.layers().iter().enumerate() {
        let (tag, dims): (u8, Vec<usize>) = match spec.kind {
            LayerKind::Conv(g) => (0, vec![g.in_channels, g.out_channels, g.kernel, g.rows, g.cols]),
            LayerKind::Pool(g) => (1, vec![g.channels, g.rows, g.cols]),
            LayerKind::Fc { in_size, out_size } => (2, vec![in_size, out_size]),
        };
        out.push(tag);
        out.push(match spec.activation {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Softmax => 2,
        });
        dims.into_iter().for_each(|d| put_u32(&mut out, d));
        let p = &model.params()[l];
        for values in [&p.weights, &p.bias] {
            put_u32(&mut out, values.len());
            values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        let m = &model.masks()[l];
        put_bits(&mut out, m.weights.iter().chain(&m.bias));
        put_u32(&mut out, model.alive()[l].len());
        put_bits(&mut out, model.alive()[l].iter());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::Malformed(format!("unexpected end at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn floats(&mut self, expected: usize) -> Result<Vec<f32>, ModelError> {
        let n = self.u32()?;
        if n != expected {
            return Err(ModelError::Malformed(format!("expected {expected} values, found {n}")));
        }
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| ModelError::Malformed("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn bits(&mut self, n: usize) -> Result<Vec<bool>, ModelError> {
        let bytes = self.take(n.div_ceil(8))?;
        Ok((0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelGraph, ModelError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 {
        return Err(ModelError::ChecksumError);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(ModelError::ChecksumError);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
        return Err(ModelError::ChecksumError);
    }

    let mut r = Reader { buf: body, pos: 12 };
    let input = Shape {
        channels: r.u32()?,
        rows: r.u32()?,
        cols: r.u32()?,
    };
    let depth = r.u32()?;
    let mut layers = Vec::with_capacity(depth);
    let mut params = Vec::with_capacity(depth);
    let mut masks = Vec::with_capacity(depth);
    let mut alive = Vec::with_capacity(depth);
    for _ in 0..depth {
        let tag = r.u8()?;
        let activation = match r.u8()? {
            0 => Activation::None,
            1 => Activation::Relu,
            2 => Activation::Softmax,
            a => return Err(ModelError::Malformed(format!("activation tag {a}"))),
        };
        let kind = match tag {
            0 => LayerKind::Conv(ConvGeom {
                in_channels: r.u32()?,
                out_channels: r.u32()?,
                kernel: r.u32()?,
                rows: r.u32()?,
                cols: r.u32()?,
            }),
            1 => LayerKind::Pool(PoolGeom {
                channels: r.u32()?,
                rows: r.u32()?,
                cols: r.u32()?,
            }),
            2 => LayerKind::Fc {
                in_size: r.u32()?,
                out_size: r.u32()?,
            },
            t => return Err(ModelError::Malformed(format!("layer kind tag {t}"))),
        };
        let spec = LayerSpec { kind, activation };
        let weights = r.floats(spec.weight_len())?;
        let bias = r.floats(spec.bias_len())?;
        let bits = r.bits(weights.len() + bias.len())?;
        let (wm, bm) = bits.split_at(weights.len());
        let units = r.u32()?;
        if units != spec.units() {
            return Err(ModelError::Malformed(format!(
                "{units} units, expected {}",
                spec.units()
            )));
        }
        alive.push(r.bits(units)?);
        masks.push(LayerMask {
            weights: wm.to_vec(),
            bias: bm.to_vec(),
        });
        params.push(LayerParams { weights, bias });
        layers.push(spec);
    }
    if r.pos != body.len() {
        return Err(ModelError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    ModelGraph::from_parts(input, layers, params, masks, alive)
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph, ModelError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_reference_model;

    fn bit_identical(a: &ModelGraph, b: &ModelGraph) -> bool {
        let bits = |m: &ModelGraph| -> Vec<u32> {
            m.params()
                .iter()
                .flat_map(|p| p.weights.iter().chain(&p.bias).map(|v| v.to_bits()))
                .collect()
        };
        a.layers() == b.layers()
            && a.input_shape() == b.input_shape()
            && a.masks() == b.masks()
            && a.alive() == b.alive()
            && bits(a) == bits(b)
    }

    fn sample_model() -> ModelGraph {
        let mut m = build_reference_model(11);
        m.masks_mut()[8].weights[5] = false;
        m.masks_mut()[12].bias[3] = false;
        m.params_mut()[0].weights[0] = -0.0;
        m.apply_masks();
        m.alive_mut()[10][7] = false;
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.splitnn");
        let m = sample_model();
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert!(bit_identical(&m, &back));
        assert_eq!(encode(&back), fs::read(&path).unwrap());
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode(&sample_model());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(ModelError::BadMagic)));
        assert!(matches!(decode(b"SPL"), Err(ModelError::BadMagic)));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = encode(&sample_model());
        bytes[8] = 9;
        assert!(matches!(
            decode(&bytes),
            Err(ModelError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn truncated_or_corrupt() {
        let bytes = encode(&sample_model());
        assert!(matches!(
            decode(&bytes[..bytes.len() / 2]),
            Err(ModelError::ChecksumError)
        ));
        assert!(matches!(decode(&bytes[..13]), Err(ModelError::ChecksumError)));
        let mut flipped = bytes.clone();
        flipped[1000] ^= 0x10;
        assert!(matches!(decode(&flipped), Err(ModelError::ChecksumError)));
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample_model());
        assert_eq!(&bytes[..8], b"SPLITNN1");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &13u32.to_le_bytes());
        // first layer: conv tag, relu tag
        assert_eq!(&bytes[28..30], &[0, 1]);
    }
}
