//! Binary PGM (`P5`) and raw `EQT1` tensor files.
//!
//! PGM samples map to `[0, 1]` by the file's maxval. `EQT1` files hold the
//! magic bytes, a little-endian `u32` rank, `u32` dims, then row-major
//! little-endian `f64` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::PlanarImage;

const EQT_MAGIC: &[u8; 4] = b"EQT1";

/// Decodes a binary greyscale PGM.
pub fn decode_pgm(bytes: &[u8]) -> Result<PlanarImage> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated PGM header".into())),
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::Format("not a binary PGM (P5)".into()));
    }
    let mut number = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::Format(format!("bad PGM {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!(
            "unsupported PGM geometry {width}x{height}, maxval {maxval}"
        )));
    }
    // one whitespace byte separates header and raster
    pos += 1;
    let wide = maxval > 255;
    let n = width * height;
    let raster = bytes
        .get(pos..pos + n * if wide { 2 } else { 1 })
        .ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
    let scale = maxval as f64;
    let data = if wide {
        raster
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / scale)
            .collect()
    } else {
        raster.iter().map(|&b| b as f64 / scale).collect()
    };
    PlanarImage::new(height, width, 1, 1.0, data)
}

/// Encodes channel 0 of `img`, clamped to `[0, 1]`, with the given maxval
/// (16-bit samples when above 255).
pub fn encode_pgm(img: &PlanarImage, maxval: u16) -> Result<Vec<u8>> {
    if maxval == 0 {
        return Err(Error::InvalidArgument("PGM maxval must be positive".into()));
    }
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    let m = maxval as f64;
    for i in 0..img.height() {
        for j in 0..img.width() {
            let v = (img.get(i, j, 0).clamp(0.0, 1.0) * m).round() as u16;
            if maxval > 255 {
                out.extend_from_slice(&v.to_be_bytes());
            } else {
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

/// Encodes `img` as a rank-3 `(H, W, C)` tensor.
pub fn encode_eqt(img: &PlanarImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * 4 + img.data().len() * 8);
    out.extend_from_slice(EQT_MAGIC);
    out.extend_from_slice(&3u32.to_le_bytes());
    for d in [img.height(), img.width(), img.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated tensor header".into()))
}

/// Decodes a tensor of rank 2 `(H, W)` or rank 3 `(H, W, C)`.
pub fn decode_eqt(bytes: &[u8]) -> Result<PlanarImage> {
    if bytes.get(..4) != Some(EQT_MAGIC) {
        return Err(Error::Format("missing EQT1 magic".into()));
    }
    let rank = read_u32(bytes, 4)? as usize;
    if !(2..=3).contains(&rank) {
        return Err(Error::Format(format!("rank {rank} tensor is not an image")));
    }
    let dims = (0..rank)
        .map(|k| read_u32(bytes, 8 + 4 * k).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let count = count.ok_or_else(|| Error::Format("tensor dims overflow".into()))?;
    let start = 8 + 4 * rank;
    let payload = bytes
        .get(start..)
        .filter(|p| p.len() == count * 8)
        .ok_or_else(|| Error::Format(format!("payload does not hold {count} values")))?;
    let data = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let channels = if rank == 3 { dims[2] } else { 1 };
    PlanarImage::new(dims[0], dims[1], channels, 1.0, data)
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// Reads a `.pgm` file, or an `EQT1` tensor for any other extension.
pub fn load_image(path: &Path) -> Result<PlanarImage> {
    let bytes = fs::read(path)?;
    if is_pgm(path) {
        decode_pgm(&bytes)
    } else {
        decode_eqt(&bytes)
    }
}

/// Writes 8-bit PGM for `.pgm` paths and `EQT1` otherwise.
pub fn save_image(path: &Path, img: &PlanarImage) -> Result<()> {
    let bytes = if is_pgm(path) {
        encode_pgm(img, 255)?
    } else {
        encode_eqt(img)
    };
    fs::write(path, bytes)?;
    Ok(())
}
