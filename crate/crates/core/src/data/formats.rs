//! On-disk formats: binary 8-bit PGM, PNG (via the `image` crate, with
//! explicit luma weights for color inputs), and the raw little-endian f32
//! depth raster.

use crate::grid::Grid;
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Depth raster header magic.
pub const DEPTH_MAGIC: &[u8; 4] = b"LFDZ";

pub fn write_pgm(path: &Path, image: &Grid<u8>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", image.width, image.height)?;
    f.write_all(&image.data)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Grid<u8>> {
    let bytes = std::fs::read(path)?;
    let bad = |what: &str| Error::Data(format!("{}: {}", path.display(), what));
    if !bytes.starts_with(b"P5") {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    // Header: magic, width, height, maxval, one whitespace, then raster.
    let mut fields: Vec<usize> = Vec::new();
    let mut pos = 2;
    while fields.len() < 3 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed PGM header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?;
        fields.push(text.parse().map_err(|_| bad("bad header number"))?);
    }
    if fields.len() != 3 || fields[2] != 255 {
        return Err(bad("expected 8-bit PGM"));
    }
    pos += 1; // single whitespace after maxval
    let (w, h) = (fields[0], fields[1]);
    let raster = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| bad("truncated raster"))?;
    Ok(Grid::from_vec(w, h, raster.to_vec()))
}

pub fn write_png(path: &Path, image: &Grid<u8>) -> Result<()> {
    let buf = image::GrayImage::from_raw(image.width as u32, image.height as u32, image.data.clone())
        .ok_or_else(|| Error::Data("png buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}

/// Read PGM or PNG as 8-bit grayscale. Color PNGs convert with luma weights
/// 0.299 / 0.587 / 0.114.
pub fn read_image(path: &Path) -> Result<Grid<u8>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "pgm" => read_pgm(path),
        "png" => {
            let img = image::open(path)?;
            let rgb = img.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let data = rgb
                .pixels()
                .map(|p| {
                    (0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
                        .round()
                        .clamp(0.0, 255.0) as u8
                })
                .collect();
            Ok(Grid::from_vec(w, h, data))
        }
        other => Err(Error::Data(format!(
            "unsupported image extension '{other}' for {}",
            path.display()
        ))),
    }
}

/// Raw depth raster: 16-byte header (magic, width u32, height u32, reserved
/// u32), then row-major little-endian f32.
pub fn write_depth(path: &Path, depth: &Grid<f32>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(DEPTH_MAGIC)?;
    f.write_all(&(depth.width as u32).to_le_bytes())?;
    f.write_all(&(depth.height as u32).to_le_bytes())?;
    f.write_all(&0u32.to_le_bytes())?;
    let mut buf = Vec::with_capacity(depth.data.len() * 4);
    for v in &depth.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<Grid<f32>> {
    let mut f = std::fs::File::open(path)?;
    let bad = |what: String| Error::Data(format!("{}: {}", path.display(), what));
    let mut header = [0u8; 16];
    f.read_exact(&mut header)
        .map_err(|_| bad("truncated depth header (need 16 bytes)".into()))?;
    if &header[0..4] != DEPTH_MAGIC {
        return Err(bad(format!(
            "bad depth magic {:?}, want {:?}",
            &header[0..4],
            DEPTH_MAGIC
        )));
    }
    let w = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    let want = w * h * 4;
    if buf.len() != want {
        return Err(bad(format!(
            "depth payload is {} bytes at byte offset 16, want {want}",
            buf.len()
        )));
    }
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Grid::from_vec(w, h, data))
}
