//! Binary feature-file interop format, for exchanging keypoints and
//! descriptors with external extractors: header (magic "LFFT", version u16,
//! count u32, desc_dim u16), then per keypoint five f32 fields
//! (x, y, scale, orientation, score) and `desc_dim` f32 descriptor entries,
//! all little-endian.

use super::FeatureSet;
use crate::detector::Keypoint;
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LFFT";
const VERSION: u16 = 1;

pub fn export_features(path: &Path, set: &FeatureSet) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(set.keypoints.len() as u32).to_le_bytes())?;
    f.write_all(&(set.dim as u16).to_le_bytes())?;
    let mut buf = Vec::with_capacity(set.keypoints.len() * (5 + set.dim) * 4);
    for (i, kp) in set.keypoints.iter().enumerate() {
        for v in [kp.x, kp.y, kp.scale, kp.orientation, kp.score] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in set.descriptor(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn import_features(path: &Path) -> Result<FeatureSet> {
    let bytes = std::fs::read(path)?;
    let bad = |offset: usize, what: &str| {
        Error::Data(format!(
            "{}: {} at byte offset {offset}",
            path.display(),
            what
        ))
    };
    if bytes.len() < 12 {
        return Err(bad(bytes.len(), "truncated header (need 12 bytes)"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad(0, "bad magic, want LFFT"));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(bad(4, "unsupported version"));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let dim = u16::from_le_bytes(bytes[10..12].try_into().unwrap()) as usize;
    let stride = (5 + dim) * 4;
    let want = 12 + count * stride;
    if bytes.len() != want {
        let offset = bytes.len().min(want);
        return Err(bad(
            offset,
            &format!("payload is {} bytes, want {}", bytes.len() - 12, want - 12),
        ));
    }
    let mut keypoints = Vec::with_capacity(count);
    let mut descriptors = Vec::with_capacity(count * dim);
    let mut cursor = &bytes[12..];
    let read_f32 = |cursor: &mut &[u8]| -> f32 {
        let mut b = [0u8; 4];
        cursor.read_exact(&mut b).expect("length checked");
        f32::from_le_bytes(b)
    };
    for _ in 0..count {
        let x = read_f32(&mut cursor);
        let y = read_f32(&mut cursor);
        let scale = read_f32(&mut cursor);
        let orientation = read_f32(&mut cursor);
        let score = read_f32(&mut cursor);
        keypoints.push(Keypoint {
            x,
            y,
            scale,
            orientation,
            score,
        });
        for _ in 0..dim {
            descriptors.push(read_f32(&mut cursor));
        }
    }
    if descriptors.iter().any(|v| !v.is_finite()) {
        return Err(bad(12, "non-finite descriptor entries"));
    }
    Ok(FeatureSet {
        keypoints,
        descriptors,
        dim,
        tag: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    })
}
