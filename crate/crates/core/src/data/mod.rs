//! Dataset manifests, frame loading with per-image normalization, pair
//! sampling, training-crop extraction, and the synthetic scene generator.

pub mod formats;
pub mod synth;

use crate::geometry::{CameraIntrinsics, CameraPose, FrameRecord};
use crate::grid::Grid;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Manifest schema tag; states the pose convention.
pub const MANIFEST_SCHEMA: &str = "localfeat/v1 poses=camera-from-world rotation=row-major";

/// Depth sentinel: values <= 0 or non-finite are invalid.
pub fn depth_is_valid(z: f32) -> bool {
    z.is_finite() && z > 0.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseJson {
    /// Row-major 3x3 rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl PoseJson {
    pub fn to_pose(&self) -> CameraPose {
        let r = &self.rotation;
        CameraPose {
            rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            translation: self.translation,
        }
    }

    pub fn from_pose(p: &CameraPose) -> Self {
        let r = &p.rotation;
        PoseJson {
            rotation: [
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ],
            translation: p.translation,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub image: String,
    pub depth: String,
    pub intrinsics: CameraIntrinsics,
    pub pose: PoseJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub schema: String,
    pub scene: String,
    /// "train", "val", or "test".
    pub split: String,
    pub frames: Vec<ManifestFrame>,
    #[serde(default)]
    pub sfm_points: Vec<[f64; 3]>,
}

impl SequenceManifest {
    pub fn validate(&self) -> Result<()> {
        if self.schema != MANIFEST_SCHEMA {
            return Err(Error::Data(format!(
                "unknown manifest schema '{}', want '{MANIFEST_SCHEMA}'",
                self.schema
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            f.intrinsics.validate()?;
            f.pose.to_pose().validate_orthonormal().map_err(|e| {
                Error::Data(format!("frame {i} of '{}': {e}", self.scene))
            })?;
        }
        Ok(())
    }
}

pub fn load_manifest(seq_dir: &Path) -> Result<SequenceManifest> {
    let path = seq_dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let manifest: SequenceManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(seq_dir: &Path, manifest: &SequenceManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(seq_dir.join("manifest.json"), text)?;
    Ok(())
}

/// Per-image normalization by mean and standard deviation, computed over
/// valid pixels when a mask is given. Degenerate spreads clamp to 1e-6.
pub fn normalize_grid(values: &Grid<f32>, valid: Option<&Grid<bool>>) -> Grid<f32> {
    let select = |i: usize| valid.map_or(true, |m| m.data[i]);
    let mut n = 0usize;
    let mut mean = 0.0f64;
    for (i, &v) in values.data.iter().enumerate() {
        if select(i) {
            mean += v as f64;
            n += 1;
        }
    }
    if n == 0 {
        // Nothing valid to normalize against; fall back to the full image.
        return normalize_grid(values, None);
    }
    mean /= n as f64;
    let mut var = 0.0f64;
    for (i, &v) in values.data.iter().enumerate() {
        if select(i) {
            var += (v as f64 - mean) * (v as f64 - mean);
        }
    }
    let std = (var / n as f64).sqrt().max(1e-6);
    values.map(|v| ((v as f64 - mean) / std) as f32)
}

/// Load one frame: image (PGM/PNG), depth raster, normalization, and
/// validity mask.
pub fn load_frame(seq_dir: &Path, entry: &ManifestFrame) -> Result<FrameRecord> {
    let image_u8 = formats::read_image(&seq_dir.join(&entry.image))?;
    let depth = formats::read_depth(&seq_dir.join(&entry.depth))?;
    if depth.width != image_u8.width || depth.height != image_u8.height {
        return Err(Error::Data(format!(
            "{}: depth {}x{} does not match image {}x{}",
            entry.depth, depth.width, depth.height, image_u8.width, image_u8.height
        )));
    }
    entry.intrinsics.validate()?;
    let pose = entry.pose.to_pose();
    pose.validate_orthonormal()?;
    let valid = depth.map(depth_is_valid);
    let gray = image_u8.map(|v| v as f32);
    let image = normalize_grid(&gray, Some(&valid));
    Ok(FrameRecord {
        image,
        image_u8,
        depth,
        valid,
        intrinsics: entry.intrinsics,
        pose,
    })
}

/// Load a bare image (no geometry) for feature extraction.
pub fn load_image_frame(path: &Path) -> Result<FrameRecord> {
    let image_u8 = formats::read_image(path)?;
    let gray = image_u8.map(|v| v as f32);
    let image = normalize_grid(&gray, None);
    let (w, h) = (image_u8.width, image_u8.height);
    Ok(FrameRecord {
        image,
        image_u8,
        depth: Grid::new(w, h, 0.0),
        valid: Grid::new(w, h, false),
        intrinsics: CameraIntrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
        },
        pose: CameraPose::identity(),
    })
}

/// A whole dataset: every sequence directory under a root.
pub struct Dataset {
    pub sequences: Vec<(PathBuf, SequenceManifest)>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Dataset> {
        let mut sequences = Vec::new();
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| Error::Data(format!("{}: {e}", root.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.join("manifest.json").exists())
            .collect();
        dirs.sort();
        for dir in dirs {
            let manifest = load_manifest(&dir)?;
            sequences.push((dir, manifest));
        }
        if sequences.is_empty() {
            return Err(Error::Data(format!(
                "no sequences (directories with manifest.json) under {}",
                root.display()
            )));
        }
        Ok(Dataset { sequences })
    }

    pub fn split(&self, tag: &str) -> Vec<&(PathBuf, SequenceManifest)> {
        self.sequences.iter().filter(|(_, m)| m.split == tag).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// A candidate training/evaluation pair within one sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairSpec {
    pub a: usize,
    pub b: usize,
    /// Co-visibility in [0, 1]; 1.0 for frame-gap sampling.
    pub overlap: f64,
    pub crop_a: Option<CropWindow>,
    pub crop_b: Option<CropWindow>,
}

pub enum PairMode {
    /// All pairs `(t, t + gap)`.
    FrameGap(usize),
    /// Pairs whose co-visible SfM point fraction exceeds the threshold, with
    /// crop windows twice the co-visible extent. Windows smaller than
    /// `min_crop` are discarded.
    Visibility { threshold: f64, min_crop: usize },
}

/// Fraction of SfM points co-visible in both frames, normalized by the
/// smaller per-frame visible count.
fn covisible_overlap(
    points: &[[f64; 3]],
    fa: &FrameRecord,
    fb: &FrameRecord,
) -> (f64, Vec<usize>) {
    let visible = |frame: &FrameRecord, p: &[f64; 3]| -> Option<(f64, f64)> {
        let cam = frame.pose.transform(*p);
        if cam[2] <= 1e-9 {
            return None;
        }
        let (u, v) = frame.intrinsics.project(cam);
        if !frame.contains(u, v) {
            return None;
        }
        match frame.depth_at(u, v) {
            Some(z) if (z - cam[2]).abs() <= 0.05 * cam[2] => Some((u, v)),
            _ => None,
        }
    };
    let in_a: Vec<bool> = points.iter().map(|p| visible(fa, p).is_some()).collect();
    let in_b: Vec<bool> = points.iter().map(|p| visible(fb, p).is_some()).collect();
    let na = in_a.iter().filter(|&&v| v).count();
    let nb = in_b.iter().filter(|&&v| v).count();
    let both: Vec<usize> = (0..points.len()).filter(|&i| in_a[i] && in_b[i]).collect();
    if na == 0 || nb == 0 {
        return (0.0, both);
    }
    (both.len() as f64 / na.min(nb) as f64, both)
}

fn covisible_crop(
    points: &[[f64; 3]],
    ids: &[usize],
    frame: &FrameRecord,
    min_crop: usize,
) -> Option<CropWindow> {
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &i in ids {
        let cam = frame.pose.transform(points[i]);
        if cam[2] <= 1e-9 {
            continue;
        }
        let (u, v) = frame.intrinsics.project(cam);
        x0 = x0.min(u);
        y0 = y0.min(v);
        x1 = x1.max(u);
        y1 = y1.max(v);
    }
    if !x0.is_finite() {
        return None;
    }
    // Double the bounding box about its center, clamp to the image.
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let (hw, hh) = ((x1 - x0).max(1.0), (y1 - y0).max(1.0));
    let x0 = (cx - hw).max(0.0) as usize;
    let y0 = (cy - hh).max(0.0) as usize;
    let x1 = ((cx + hw).ceil() as usize).min(frame.width() - 1);
    let y1 = ((cy + hh).ceil() as usize).min(frame.height() - 1);
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    if w < min_crop || h < min_crop {
        return None;
    }
    Some(CropWindow {
        x: x0,
        y: y0,
        width: w,
        height: h,
    })
}

/// Enumerate usable pairs for one sequence. Visibility mode needs the loaded
/// frames and the manifest's SfM points; `max_pairs` subsamples with `rng`.
pub fn sample_pairs(
    manifest: &SequenceManifest,
    frames: &[FrameRecord],
    mode: &PairMode,
    max_pairs: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Vec<PairSpec>> {
    let mut pairs = Vec::new();
    match *mode {
        PairMode::FrameGap(gap) => {
            if gap == 0 || manifest.frames.len() <= gap {
                return Err(Error::Data(format!(
                    "frame gap {gap} unusable for a {}-frame sequence",
                    manifest.frames.len()
                )));
            }
            for t in 0..manifest.frames.len() - gap {
                pairs.push(PairSpec {
                    a: t,
                    b: t + gap,
                    overlap: 1.0,
                    crop_a: None,
                    crop_b: None,
                });
            }
        }
        PairMode::Visibility { threshold, min_crop } => {
            if manifest.sfm_points.is_empty() {
                return Err(Error::Data(
                    "visibility pair sampling needs sfm_points in the manifest".into(),
                ));
            }
            if frames.len() != manifest.frames.len() {
                return Err(Error::Data(
                    "visibility pair sampling needs all frames loaded".into(),
                ));
            }
            for a in 0..frames.len() {
                for b in a + 1..frames.len() {
                    let (overlap, ids) =
                        covisible_overlap(&manifest.sfm_points, &frames[a], &frames[b]);
                    if ids.is_empty() || overlap < threshold {
                        continue;
                    }
                    let crop_a = covisible_crop(&manifest.sfm_points, &ids, &frames[a], min_crop);
                    let crop_b = covisible_crop(&manifest.sfm_points, &ids, &frames[b], min_crop);
                    if crop_a.is_none() || crop_b.is_none() {
                        continue;
                    }
                    pairs.push(PairSpec {
                        a,
                        b,
                        overlap,
                        crop_a,
                        crop_b,
                    });
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no usable pairs in sequence '{}' ({} frames)",
            manifest.scene,
            manifest.frames.len()
        )));
    }
    if let Some(max) = max_pairs {
        while pairs.len() > max {
            let drop = rng.random_range(0..pairs.len());
            pairs.remove(drop);
        }
    }
    Ok(pairs)
}

/// Cut a window out of a frame, shifting the principal point so reprojection
/// stays exact.
pub fn crop_frame(frame: &FrameRecord, window: &CropWindow) -> FrameRecord {
    let take = |g: &Grid<f32>| {
        let mut out = Grid::new(window.width, window.height, 0.0f32);
        for y in 0..window.height {
            for x in 0..window.width {
                out.set(x, y, g.get(window.x + x, window.y + y));
            }
        }
        out
    };
    let mut image_u8 = Grid::new(window.width, window.height, 0u8);
    let mut valid = Grid::new(window.width, window.height, false);
    for y in 0..window.height {
        for x in 0..window.width {
            image_u8.set(x, y, frame.image_u8.get(window.x + x, window.y + y));
            valid.set(x, y, frame.valid.get(window.x + x, window.y + y));
        }
    }
    FrameRecord {
        image: take(&frame.image),
        image_u8,
        depth: take(&frame.depth),
        valid,
        intrinsics: CameraIntrinsics {
            fx: frame.intrinsics.fx,
            fy: frame.intrinsics.fy,
            cx: frame.intrinsics.cx - window.x as f64,
            cy: frame.intrinsics.cy - window.y as f64,
        },
        pose: frame.pose,
    }
}

fn valid_fraction(frame: &FrameRecord) -> f64 {
    frame.valid.data.iter().filter(|&&v| v).count() as f64 / frame.valid.data.len() as f64
}

/// Random square crops of both frames for training. Redraws (up to 10
/// attempts) until at least 25% of each crop is valid; `None` when no draw
/// succeeds.
pub fn crop_training_pair(
    a: &FrameRecord,
    b: &FrameRecord,
    size: usize,
    rng: &mut impl Rng,
) -> Result<Option<(FrameRecord, FrameRecord)>> {
    for frame in [a, b] {
        if frame.width() < size || frame.height() < size {
            return Err(Error::Data(format!(
                "frame {}x{} smaller than crop size {size}",
                frame.width(),
                frame.height()
            )));
        }
    }
    for _ in 0..10 {
        let mut windows = [(0usize, 0usize); 2];
        for (i, frame) in [a, b].iter().enumerate() {
            let max_x = frame.width() - size;
            let max_y = frame.height() - size;
            windows[i] = (
                if max_x == 0 { 0 } else { rng.random_range(0..=max_x) },
                if max_y == 0 { 0 } else { rng.random_range(0..=max_y) },
            );
        }
        let ca = crop_frame(
            a,
            &CropWindow {
                x: windows[0].0,
                y: windows[0].1,
                width: size,
                height: size,
            },
        );
        let cb = crop_frame(
            b,
            &CropWindow {
                x: windows[1].0,
                y: windows[1].1,
                width: size,
                height: size,
            },
        );
        if valid_fraction(&ca) >= 0.25 && valid_fraction(&cb) >= 0.25 {
            return Ok(Some((ca, cb)));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests;
