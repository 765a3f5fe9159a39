//! Binary network checkpoints.
//!
//! Layout, little-endian throughout: `EQCK`, `u32` version, `u32` input
//! channels, `u32` group order, `u32` layer count, one record per layer, the
//! `f64` parameters in [`NetworkSpec::params`] order, and a CRC32 of every
//! preceding byte.
//!
//! A layer record is a `u8` kind code, `u32` in/out channels, `u32` skip
//! index, `u32` filter count, `u32` bias length, then for convolutions the
//! basis as `u32` filter size, `u32` cutoff, `u32` function count and
//! `(i32 k1, i32 k2, u8 phase)` per function.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::conv::{LayerKind, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::filter::{FourierBasis, ParamFilter, Phase};
use crate::tensor::GroupSpec;

const MAGIC: &[u8; 4] = b"EQCK";
pub const FORMAT_VERSION: u32 = 1;

fn kind_code(kind: LayerKind) -> (u8, u32) {
    match kind {
        LayerKind::Lift => (0, 0),
        LayerKind::GroupConv => (1, 0),
        LayerKind::PlainConv => (2, 0),
        LayerKind::Bias => (3, 0),
        LayerKind::ReLU => (4, 0),
        LayerKind::ResidualAdd { skip } => (5, skip as u32),
        LayerKind::OrientationPool => (6, 0),
    }
}

fn kind_from_code(code: u8, skip: u32) -> Result<LayerKind> {
    Ok(match code {
        0 => LayerKind::Lift,
        1 => LayerKind::GroupConv,
        2 => LayerKind::PlainConv,
        3 => LayerKind::Bias,
        4 => LayerKind::ReLU,
        5 => LayerKind::ResidualAdd {
            skip: skip as usize,
        },
        6 => LayerKind::OrientationPool,
        other => return Err(Error::Format(format!("unknown layer kind {other}"))),
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(net: &NetworkSpec) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, net.input_channels());
    put_u32(&mut out, net.group().order());
    put_u32(&mut out, net.layers().len());
    for layer in net.layers() {
        let (code, skip) = kind_code(layer.kind);
        out.push(code);
        put_u32(&mut out, layer.in_channels);
        put_u32(&mut out, layer.out_channels);
        put_u32(&mut out, skip as usize);
        put_u32(&mut out, layer.filters.len());
        put_u32(&mut out, layer.bias.len());
        if let Some(f) = layer.filters.first() {
            let b = f.basis();
            put_u32(&mut out, b.filter_size());
            put_u32(&mut out, b.cutoff());
            put_u32(&mut out, b.functions().len());
            for func in b.functions() {
                out.extend_from_slice(&func.k1.to_le_bytes());
                out.extend_from_slice(&func.k2.to_le_bytes());
                out.push(match func.phase {
                    Phase::Cosine => 0,
                    Phase::Sine => 1,
                });
            }
        }
    }
    for v in net.params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

struct LayerHeader {
    kind: LayerKind,
    in_channels: usize,
    out_channels: usize,
    filters: usize,
    bias: usize,
    basis: Option<Arc<FourierBasis>>,
}

pub fn decode(bytes: &[u8]) -> Result<NetworkSpec> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing EQCK magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader {
        bytes: body,
        pos: 4,
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let input_channels = r.count()?;
    let group = GroupSpec::new(r.count()?)?;
    let n_layers = r.count()?;
    let mut headers = Vec::new();
    for _ in 0..n_layers {
        let code = r.u8()?;
        let in_channels = r.count()?;
        let out_channels = r.count()?;
        let skip = r.u32()?;
        let kind = kind_from_code(code, skip)?;
        let filters = r.count()?;
        let bias = r.count()?;
        let basis = if filters > 0 {
            let p = r.count()?;
            let cutoff = r.count()?;
            let basis = FourierBasis::new(p, cutoff)?;
            let n = r.count()?;
            if n != basis.len() {
                return Err(Error::Format(format!(
                    "basis has {n} functions, expected {}",
                    basis.len()
                )));
            }
            for func in basis.functions() {
                let (k1, k2, phase) = (r.i32()?, r.i32()?, r.u8()?);
                let expect = match func.phase {
                    Phase::Cosine => 0,
                    Phase::Sine => 1,
                };
                if (k1, k2, phase) != (func.k1, func.k2, expect) {
                    return Err(Error::Format("basis frequencies do not match".into()));
                }
            }
            Some(Arc::new(basis))
        } else {
            None
        };
        headers.push(LayerHeader {
            kind,
            in_channels,
            out_channels,
            filters,
            bias,
            basis,
        });
    }
    let mut layers = Vec::with_capacity(headers.len());
    for h in headers {
        let mut filters = Vec::with_capacity(h.filters);
        if let Some(basis) = &h.basis {
            for _ in 0..h.filters {
                let coeffs = (0..basis.len())
                    .map(|_| r.f64())
                    .collect::<Result<Vec<_>>>()?;
                filters.push(ParamFilter::new(basis.clone(), coeffs)?);
            }
        }
        let bias = (0..h.bias).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let layer = match h.kind {
            LayerKind::Lift => LayerSpec::lift(h.in_channels, h.out_channels, group, filters)?,
            LayerKind::GroupConv => {
                LayerSpec::group_conv(h.in_channels, h.out_channels, group, filters)?
            }
            LayerKind::PlainConv => LayerSpec::plain_conv(h.in_channels, h.out_channels, filters)?,
            LayerKind::Bias => LayerSpec::bias(h.in_channels, group, bias)?,
            LayerKind::ReLU => LayerSpec::relu(h.in_channels, group),
            LayerKind::ResidualAdd { skip } => LayerSpec::residual_add(skip, h.in_channels, group),
            LayerKind::OrientationPool => LayerSpec::orientation_pool(h.in_channels, group),
        };
        layers.push(layer);
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    NetworkSpec::new(input_channels, group, layers)
}

pub fn save(net: &NetworkSpec, path: &Path) -> Result<()> {
    fs::write(path, encode(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NetworkSpec> {
    decode(&fs::read(path)?)
}
