//! Ground-truth supervision geometry: pinhole reprojection through depth and
//! SE(3) pose, score-map warping, occlusion checks, supervision-target
//! generation, keypoint transport, and SfM-based depth cleaning.
//!
//! Pose convention is camera-from-world throughout: `X_cam = R * X_world + t`.
//! The relative transform between frames is `P_rel = P_j * P_i^-1`.

use crate::detector::Keypoint;
use crate::grid::{bilinear_inverse_depth, bilinear_masked, Grid};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Data(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }

    /// Camera-frame point for pixel `(x, y)` at depth `z`.
    #[inline]
    pub fn backproject(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        [(x - self.cx) / self.fx * z, (y - self.cy) / self.fy * z, z]
    }
}

/// Rigid camera pose, camera-from-world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Row-major rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// `R^T R = I` within 1e-9 and `det R = +1`.
    pub fn validate_orthonormal(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::Data(format!(
                        "rotation not orthonormal: (R^T R)[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("rotation determinant {det}, want +1")));
        }
        Ok(())
    }

    #[inline]
    pub fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    pub fn inverse(&self) -> CameraPose {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let nt = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        CameraPose {
            rotation: rt,
            translation: nt,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        let (a, b) = (&self.rotation, &other.rotation);
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        let rt = self.transform(other.translation);
        // transform() adds self.translation, which is exactly what we want:
        // t = R_a * t_b + t_a
        CameraPose {
            rotation,
            translation: rt,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let inv = self.inverse();
        inv.translation
    }

    /// Rotation about the camera z axis (roll), as a pose.
    pub fn roll(angle: f64) -> CameraPose {
        let (s, c) = angle.sin_cos();
        CameraPose {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }
}

/// `P_rel = P_j * P_i^-1`, mapping camera-i coordinates to camera-j.
pub fn relative_pose(pose_i: &CameraPose, pose_j: &CameraPose) -> CameraPose {
    pose_j.compose(&pose_i.inverse())
}

/// In-plane rotation component of a relative rotation, i.e. the angle by
/// which image directions rotate from frame i to frame j. Exact for pure
/// rolls about the optical axis, a first-order approximation otherwise.
pub fn roll_angle(rel: &CameraPose) -> f64 {
    let r = &rel.rotation;
    (r[1][0] - r[0][1]).atan2(r[0][0] + r[1][1])
}

pub fn wrap_angle(a: f64) -> f64 {
    a - std::f64::consts::TAU * ((a - std::f64::consts::PI) / std::f64::consts::TAU).ceil()
}

/// One frame of geometric supervision: normalized grayscale image, depth with
/// validity mask, intrinsics, and pose.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    /// Per-image mean/std normalized grayscale.
    pub image: Grid<f32>,
    /// Original 8-bit pixels, kept for visualization.
    pub image_u8: Grid<u8>,
    /// Depth in scene units; entries <= 0 or non-finite are invalid.
    pub depth: Grid<f32>,
    /// False wherever depth is invalid.
    pub valid: Grid<bool>,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl FrameRecord {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    /// Depth at a sub-pixel location (inverse-depth interpolation, strict
    /// validity).
    pub fn depth_at(&self, x: f64, y: f64) -> Option<f64> {
        bilinear_inverse_depth(&self.depth, &self.valid, x, y)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width() - 1) as f64 && y <= (self.height() - 1) as f64
    }
}

/// Result of pushing a pixel through depth + relative pose.
#[derive(Debug, Clone, Copy)]
pub struct Reprojection {
    pub x: f64,
    pub y: f64,
    /// Depth of the transformed point in the target camera.
    pub z: f64,
    /// False when the point lands behind the camera or outside the image.
    pub valid: bool,
}

/// Transform pixel `(x, y)` of frame i, at known source depth `z`, into
/// frame j.
pub fn reproject_with_depth(
    x: f64,
    y: f64,
    z: f64,
    frame_i: &FrameRecord,
    frame_j: &FrameRecord,
) -> Reprojection {
    let cam_i = frame_i.intrinsics.backproject(x, y, z);
    let world = frame_i.pose.inverse().transform(cam_i);
    let cam_j = frame_j.pose.transform(world);
    if cam_j[2] <= 1e-9 {
        return Reprojection {
            x: 0.0,
            y: 0.0,
            z: cam_j[2],
            valid: false,
        };
    }
    let (u, v) = frame_j.intrinsics.project(cam_j);
    Reprojection {
        x: u,
        y: v,
        z: cam_j[2],
        valid: frame_j.contains(u, v),
    }
}

/// Transform pixel `(x, y)` of frame i into frame j, reading the source
/// depth from frame i's depth map. Invalid source depth yields
/// `valid = false` rather than an error.
pub fn reproject(x: f64, y: f64, frame_i: &FrameRecord, frame_j: &FrameRecord) -> Reprojection {
    match frame_i.depth_at(x, y) {
        Some(z) => reproject_with_depth(x, y, z, frame_i, frame_j),
        None => Reprojection {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            valid: false,
        },
    }
}

/// Depth-consistency visibility test for an already reprojected point:
/// visible iff frame j's interpolated depth agrees with the predicted depth
/// within `rel_tol * z_pred`.
pub fn occlusion_check_reprojected(rep: &Reprojection, frame_j: &FrameRecord, rel_tol: f64) -> bool {
    if !rep.valid {
        return false;
    }
    match bilinear_masked(&frame_j.depth, &frame_j.valid, rep.x, rep.y) {
        Some(z_obs) => (rep.z - z_obs).abs() <= rel_tol * rep.z,
        None => false,
    }
}

/// Visibility of frame-i pixel `(x, y)` in frame j.
pub fn occlusion_check(
    x: f64,
    y: f64,
    frame_i: &FrameRecord,
    frame_j: &FrameRecord,
    rel_tol: f64,
) -> bool {
    let rep = reproject(x, y, frame_i, frame_j);
    occlusion_check_reprojected(&rep, frame_j, rel_tol)
}

/// Inverse-warp frame j's score map onto frame i's pixel grid. Each valid
/// pixel of frame i is reprojected into frame j and `s_j` sampled
/// bilinearly; pixels failing depth validity, reprojection, or the occlusion
/// check are masked out.
pub fn warp_score_map(
    s_j: &Grid<f32>,
    frame_i: &FrameRecord,
    frame_j: &FrameRecord,
    rel_tol: f64,
) -> Result<(Grid<f32>, Grid<bool>)> {
    let (w, h) = (frame_i.width(), frame_i.height());
    let mut warped = Grid::new(w, h, 0.0f32);
    let mut mask = Grid::new(w, h, false);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if !frame_i.valid.get(x, y) {
                continue;
            }
            let z = frame_i.depth.get(x, y) as f64;
            let rep = reproject_with_depth(x as f64, y as f64, z, frame_i, frame_j);
            if !rep.valid || !occlusion_check_reprojected(&rep, frame_j, rel_tol) {
                continue;
            }
            warped.set(x, y, s_j.bilinear(rep.x, rep.y) as f32);
            mask.set(x, y, true);
            any = true;
        }
    }
    if !any {
        return Err(Error::DegeneratePair(
            "no valid reprojections between frames".into(),
        ));
    }
    Ok((warped, mask))
}

/// Hard non-maximum suppression: masked pixels that are the strict maximum
/// of their window (row-major order breaks ties), sorted by descending
/// score, at most `k`.
pub fn nms_maxima(
    map: &Grid<f32>,
    mask: &Grid<bool>,
    window: usize,
    k: usize,
) -> Vec<(usize, usize)> {
    let r = (window / 2) as isize;
    let (w, h) = (map.width as isize, map.height as isize);
    let mut candidates: Vec<(usize, usize, f32)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x as usize, y as usize) {
                continue;
            }
            let v = map.get(x as usize, y as usize);
            let mut is_max = true;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    if !mask.get(nx as usize, ny as usize) {
                        continue;
                    }
                    let nv = map.get(nx as usize, ny as usize);
                    let before = (ny, nx) < (y, x);
                    if nv > v || (nv == v && before) {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                candidates.push((x as usize, y as usize, v));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.1, a.0).cmp(&(b.1, b.0)))
    });
    candidates.truncate(k);
    candidates.into_iter().map(|(x, y, _)| (x, y)).collect()
}

/// Build the supervision target: place unit-height Gaussians (std `sigma`,
/// truncated at 3 sigma, combined by pixelwise max) at the top-`k` hard-NMS
/// maxima of the warped map. Fewer than `k` survivors just uses them all.
pub fn clean_target(
    warped: &Grid<f32>,
    mask: &Grid<bool>,
    k: usize,
    sigma: f64,
    nms_window: usize,
) -> Grid<f32> {
    let centers = nms_maxima(warped, mask, nms_window, k);
    let mut target = Grid::new(warped.width, warped.height, 0.0f32);
    let r = (3.0 * sigma).ceil() as isize;
    let r3_sq = (3.0 * sigma) * (3.0 * sigma);
    for (cx, cy) in centers {
        for dy in -r..=r {
            for dx in -r..=r {
                let d2 = (dx * dx + dy * dy) as f64;
                if d2 > r3_sq {
                    continue;
                }
                let x = cx as isize + dx;
                let y = cy as isize + dy;
                if x < 0 || y < 0 || x >= warped.width as isize || y >= warped.height as isize {
                    continue;
                }
                let g = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
                let cur = target.get(x as usize, y as usize);
                if g > cur {
                    target.set(x as usize, y as usize, g);
                }
            }
        }
    }
    target
}

/// Scale change induced by the viewpoint change for a point at source depth
/// `z_i` mapping to target depth `z_j`.
pub fn scale_transport(
    intr_i: &CameraIntrinsics,
    intr_j: &CameraIntrinsics,
    z_i: f64,
    z_j: f64,
) -> f64 {
    (intr_j.fx * z_i) / (intr_i.fx * z_j)
}

/// Transport keypoints from frame i into frame j: location through
/// depth + pose, scale by the focal/depth ratio, orientation by the relative
/// roll. Entries that fail depth validity, reprojection, or the occlusion
/// check are flagged invalid rather than dropped.
pub fn warp_keypoints(
    kps: &[Keypoint],
    frame_i: &FrameRecord,
    frame_j: &FrameRecord,
    rel_tol: f64,
) -> Vec<(Keypoint, bool)> {
    let rel = relative_pose(&frame_i.pose, &frame_j.pose);
    let roll = roll_angle(&rel);
    kps.iter()
        .map(|kp| {
            let (x, y) = (kp.x as f64, kp.y as f64);
            let z_i = match frame_i.depth_at(x, y) {
                Some(z) => z,
                None => return (*kp, false),
            };
            let rep = reproject_with_depth(x, y, z_i, frame_i, frame_j);
            let visible = occlusion_check_reprojected(&rep, frame_j, rel_tol);
            let factor = scale_transport(&frame_i.intrinsics, &frame_j.intrinsics, z_i, rep.z);
            let warped = Keypoint {
                x: rep.x as f32,
                y: rep.y as f32,
                scale: (kp.scale as f64 * factor) as f32,
                orientation: wrap_angle(kp.orientation as f64 + roll) as f32,
                score: kp.score,
            };
            (warped, rep.valid && visible)
        })
        .collect()
}

/// Invalidate depth pixels whose back-projected 3D point has no
/// reconstruction point within `max_dist`. Nearest-neighbor queries go
/// through a uniform voxel hash.
pub fn clean_depth(
    depth: &Grid<f32>,
    valid: &Grid<bool>,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    points: &[[f64; 3]],
    max_dist: f64,
) -> Grid<bool> {
    let mut out = valid.clone();
    if points.is_empty() {
        for v in out.data.iter_mut() {
            *v = false;
        }
        return out;
    }
    let cell = max_dist.max(1e-9);
    let key = |p: &[f64; 3]| {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    };
    let mut index: std::collections::HashMap<(i64, i64, i64), Vec<usize>> =
        std::collections::HashMap::new();
    for (i, p) in points.iter().enumerate() {
        index.entry(key(p)).or_default().push(i);
    }
    let inv = pose.inverse();
    let max_sq = max_dist * max_dist;
    for y in 0..depth.height {
        for x in 0..depth.width {
            if !out.get(x, y) {
                continue;
            }
            let z = depth.get(x, y) as f64;
            let world = inv.transform(intrinsics.backproject(x as f64, y as f64, z));
            let (kx, ky, kz) = key(&world);
            let mut near = false;
            'cells: for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if let Some(ids) = index.get(&(kx + dx, ky + dy, kz + dz)) {
                            for &i in ids {
                                let p = points[i];
                                let d = (p[0] - world[0]).powi(2)
                                    + (p[1] - world[1]).powi(2)
                                    + (p[2] - world[2]).powi(2);
                                if d <= max_sq {
                                    near = true;
                                    break 'cells;
                                }
                            }
                        }
                    }
                }
            }
            if !near {
                out.set(x, y, false);
            }
        }
    }
    out
}

/// Median nearest-neighbor spacing of a point cloud; `3 x` this is the
/// default `clean_depth` threshold.
pub fn median_point_spacing(points: &[[f64; 3]]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let mut nearest: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| {
                    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nearest.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nearest[nearest.len() / 2].sqrt()
}

#[cfg(test)]
mod tests;
