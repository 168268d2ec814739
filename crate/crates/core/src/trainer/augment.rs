//! Geometric training augmentation that keeps ground truth exact: in-plane
//! rotation folded into the camera roll, and resizing folded into the
//! intrinsics. Depth is resampled through inverse depth (exact on planar
//! surfaces); masks shrink conservatively.

use crate::geometry::{CameraIntrinsics, CameraPose, FrameRecord};
use crate::grid::{bilinear_inverse_depth, Grid};
use crate::Result;
use crate::{data::normalize_grid, Error};

/// Rotate a frame by `angle` radians about its principal point and compose
/// the equivalent roll into the pose. Requires fx == fy (square pixels),
/// which keeps the pixel-space rotation exactly equivalent to a camera roll.
pub fn rotate_frame(frame: &FrameRecord, angle: f64) -> Result<FrameRecord> {
    if (frame.intrinsics.fx - frame.intrinsics.fy).abs() > 1e-9 {
        return Err(Error::invalid(
            "rotate_frame",
            "rotation augmentation requires fx == fy",
        ));
    }
    if angle == 0.0 {
        return Ok(frame.clone());
    }
    let (w, h) = (frame.width(), frame.height());
    let (cx, cy) = (frame.intrinsics.cx, frame.intrinsics.cy);
    let (sin, cos) = angle.sin_cos();
    let mut image_u8 = Grid::new(w, h, 0u8);
    let mut gray = Grid::new(w, h, 0.0f32);
    let mut depth = Grid::new(w, h, 0.0f32);
    let mut valid = Grid::new(w, h, false);
    let raw = frame.image_u8.map(|v| v as f32);
    for y in 0..h {
        for x in 0..w {
            // Content rotates by +angle: output pixel reads from the source
            // rotated by -angle about the principal point.
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            if !frame.image.contains(sx, sy) {
                continue;
            }
            gray.set(x, y, raw.bilinear(sx, sy) as f32);
            image_u8.set(x, y, raw.bilinear(sx, sy).round().clamp(0.0, 255.0) as u8);
            if let Some(z) = bilinear_inverse_depth(&frame.depth, &frame.valid, sx, sy) {
                depth.set(x, y, z as f32);
                valid.set(x, y, true);
            }
        }
    }
    let image = normalize_grid(&gray, Some(&valid));
    // Rolling the camera by `angle` about its optical axis rotates image
    // content by the same angle about the principal point.
    let pose = CameraPose::roll(angle).compose(&frame.pose);
    Ok(FrameRecord {
        image,
        image_u8,
        depth,
        valid,
        intrinsics: frame.intrinsics,
        pose,
    })
}

/// Resize a frame by `factor`, scaling focal lengths and principal point by
/// the realized per-axis factors. Depth values are view depths and therefore
/// unchanged; the rasters are resampled.
pub fn scale_frame(frame: &FrameRecord, factor: f64) -> Result<FrameRecord> {
    if factor <= 0.0 {
        return Err(Error::invalid("scale_frame", "factor must be > 0"));
    }
    let (w, h) = (frame.width(), frame.height());
    let ow = ((w as f64 * factor).round() as usize).max(1);
    let oh = ((h as f64 * factor).round() as usize).max(1);
    if ow == w && oh == h {
        return Ok(frame.clone());
    }
    let rx = ow as f64 / w as f64;
    let ry = oh as f64 / h as f64;
    let mut image_u8 = Grid::new(ow, oh, 0u8);
    let mut gray = Grid::new(ow, oh, 0.0f32);
    let mut depth = Grid::new(ow, oh, 0.0f32);
    let mut valid = Grid::new(ow, oh, false);
    let raw = frame.image_u8.map(|v| v as f32);
    for y in 0..oh {
        for x in 0..ow {
            let sx = ((x as f64 + 0.5) / rx - 0.5).clamp(0.0, (w - 1) as f64);
            let sy = ((y as f64 + 0.5) / ry - 0.5).clamp(0.0, (h - 1) as f64);
            gray.set(x, y, raw.bilinear(sx, sy) as f32);
            image_u8.set(x, y, raw.bilinear(sx, sy).round().clamp(0.0, 255.0) as u8);
            if let Some(z) = bilinear_inverse_depth(&frame.depth, &frame.valid, sx, sy) {
                depth.set(x, y, z as f32);
                valid.set(x, y, true);
            }
        }
    }
    let image = normalize_grid(&gray, Some(&valid));
    let intrinsics = CameraIntrinsics {
        fx: frame.intrinsics.fx * rx,
        fy: frame.intrinsics.fy * ry,
        cx: (frame.intrinsics.cx + 0.5) * rx - 0.5,
        cy: (frame.intrinsics.cy + 0.5) * ry - 0.5,
    };
    Ok(FrameRecord {
        image,
        image_u8,
        depth,
        valid,
        intrinsics,
        pose: frame.pose,
    })
}

/// Randomized rotation/scale augmentation of one side of a training pair.
/// Rotation is uniform in +-pi, scale log-uniform in [1/sqrt(2), sqrt(2)].
pub fn augment_pair(
    a: FrameRecord,
    b: FrameRecord,
    rotation: bool,
    scaling: bool,
    rng: &mut impl rand::Rng,
) -> Result<(FrameRecord, FrameRecord)> {
    let mut b = b;
    if rotation {
        let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        b = rotate_frame(&b, angle)?;
    }
    if scaling {
        let half_log2 = 0.5 * std::f64::consts::LN_2;
        let factor = rng.random_range(-half_log2..half_log2).exp();
        b = scale_frame(&b, factor)?;
    }
    Ok((a, b))
}
