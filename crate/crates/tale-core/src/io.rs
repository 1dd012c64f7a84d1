//! Image and mask file formats (binary PPM/PGM, 8-bit) plus atomic writes.
//! These formats are bit-exact and dependency-light, which keeps golden
//! files and reproducibility checks trivial. PNG reading is available behind
//! the `png` feature.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Mask};

/// Writes bytes via a temp file in the same directory plus rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0)
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn quantize_channel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 bytes for a 3-channel image; values clamped to [0, 1].
pub fn ppm_bytes(x: &LatentTensor) -> Result<Vec<u8>> {
    if x.channels() != 3 {
        return Err(Error::shape("3 channels", format!("{}", x.channels())));
    }
    let (h, w) = (x.height(), x.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for xx in 0..w {
            for c in 0..3 {
                out.push(quantize_channel(x.at(c, y, xx)));
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, x: &LatentTensor) -> Result<()> {
    atomic_write(path, &ppm_bytes(x)?)
}

/// Binary P5 bytes for a mask, 0/255 encoding.
pub fn pgm_bytes(m: &Mask) -> Vec<u8> {
    let (h, w) = (m.height(), m.width());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w);
    for y in 0..h {
        for xx in 0..w {
            out.push(if m.get(y, xx) { 255 } else { 0 });
        }
    }
    out
}

pub fn write_pgm(path: &Path, m: &Mask) -> Result<()> {
    atomic_write(path, &pgm_bytes(m))
}

struct NetpbmHeader {
    width: usize,
    height: usize,
    data_offset: usize,
}

/// Parses "P6|P5 <w> <h> <maxval>" with whitespace and '#' comments.
fn parse_netpbm_header(bytes: &[u8], magic: &str) -> Result<NetpbmHeader> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(Error::Format(format!("expected {magic} header")));
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated netpbm header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Format("non-ascii netpbm header".into()))?;
        fields.push(
            text.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad netpbm field '{text}'")))?,
        );
    }
    // single whitespace byte after maxval
    if pos >= bytes.len() {
        return Err(Error::Format("truncated netpbm header".into()));
    }
    pos += 1;
    if fields[2] != 255 {
        return Err(Error::Format(format!(
            "only maxval 255 supported, got {}",
            fields[2]
        )));
    }
    Ok(NetpbmHeader {
        width: fields[0],
        height: fields[1],
        data_offset: pos,
    })
}

pub fn ppm_from_bytes(bytes: &[u8]) -> Result<LatentTensor> {
    let hdr = parse_netpbm_header(bytes, "P6")?;
    let need = 3 * hdr.width * hdr.height;
    let data = &bytes[hdr.data_offset..];
    if data.len() < need {
        return Err(Error::Format(format!(
            "P6 payload too short: {} < {need}",
            data.len()
        )));
    }
    Ok(LatentTensor::from_fn(3, hdr.height, hdr.width, |c, y, x| {
        data[3 * (y * hdr.width + x) + c] as f64 / 255.0
    }))
}

pub fn read_ppm(path: &Path) -> Result<LatentTensor> {
    ppm_from_bytes(&fs::read(path)?)
}

pub fn pgm_from_bytes(bytes: &[u8]) -> Result<Mask> {
    let hdr = parse_netpbm_header(bytes, "P5")?;
    let need = hdr.width * hdr.height;
    let data = &bytes[hdr.data_offset..];
    if data.len() < need {
        return Err(Error::Format(format!(
            "P5 payload too short: {} < {need}",
            data.len()
        )));
    }
    Ok(Mask::from_fn(hdr.height, hdr.width, |y, x| {
        data[y * hdr.width + x] >= 128
    }))
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    pgm_from_bytes(&fs::read(path)?)
}

/// Reads an image by extension: .ppm always, .png when the `png` feature is
/// enabled.
pub fn read_image(path: &Path) -> Result<LatentTensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        #[cfg(feature = "png")]
        Some("png") => {
            let img = image::open(path)
                .map_err(|e| Error::Format(format!("png decode: {e}")))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            Ok(LatentTensor::from_fn(3, h, w, |c, y, x| {
                img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
            }))
        }
        other => Err(Error::Format(format!(
            "unsupported image extension {other:?} (expected ppm{})",
            if cfg!(feature = "png") { " or png" } else { "" }
        ))),
    }
}
