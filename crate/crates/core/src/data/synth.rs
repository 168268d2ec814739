//! Synthetic plane-scene generator: textured 3D planes rendered under
//! sampled camera trajectories, with exact analytic depth (nearest ray-plane
//! intersection), poses, intrinsics, and surface-sampled SfM points.

use super::{save_manifest, ManifestFrame, PoseJson, SequenceManifest, MANIFEST_SCHEMA};
use crate::config::SynthConfig;
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::grid::Grid;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::path::{Path, PathBuf};

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn lattice(xi: i64, yi: i64, seed: u64) -> f64 {
    let h = splitmix(seed ^ (xi as u64).wrapping_mul(0x9e3779b1) ^ (yi as u64).rotate_left(32));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in [0, 1].
pub fn value_noise(x: f64, y: f64, octaves: usize, seed: u64) -> f64 {
    let mut amp = 1.0;
    let mut freq = 1.0;
    let mut total = 0.0;
    let mut norm = 0.0;
    for o in 0..octaves.max(1) {
        let (px, py) = (x * freq, y * freq);
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (smooth(px - x0), smooth(py - y0));
        let (xi, yi) = (x0 as i64, y0 as i64);
        let s = seed.wrapping_add(o as u64);
        let v = lattice(xi, yi, s) * (1.0 - fx) * (1.0 - fy)
            + lattice(xi + 1, yi, s) * fx * (1.0 - fy)
            + lattice(xi, yi + 1, s) * (1.0 - fx) * fy
            + lattice(xi + 1, yi + 1, s) * fx * fy;
        total += amp * v;
        norm += amp;
        amp *= 0.55;
        freq *= 2.0;
    }
    total / norm
}

/// A textured, bounded plane in world space.
#[derive(Debug, Clone)]
pub struct Plane {
    pub origin: [f64; 3],
    pub e1: [f64; 3],
    pub e2: [f64; 3],
    pub normal: [f64; 3],
    pub half_u: f64,
    pub half_v: f64,
    pub tex_seed: u64,
    /// Texture lattice cells per scene unit.
    pub tex_scale: f64,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

impl Plane {
    /// Ray-plane hit: returns the ray parameter t (= camera depth when the
    /// direction has unit camera-z) and plane-local uv.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64, f64)> {
        let denom = dot(self.normal, dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = dot(self.normal, sub3(self.origin, origin)) / denom;
        if t <= 0.05 {
            return None;
        }
        let p = [
            origin[0] + t * dir[0] - self.origin[0],
            origin[1] + t * dir[1] - self.origin[1],
            origin[2] + t * dir[2] - self.origin[2],
        ];
        let u = dot(p, self.e1);
        let v = dot(p, self.e2);
        if u.abs() > self.half_u || v.abs() > self.half_v {
            return None;
        }
        Some((t, u, v))
    }

    pub fn texture(&self, u: f64, v: f64, octaves: usize) -> f64 {
        value_noise(
            (u + self.half_u) * self.tex_scale,
            (v + self.half_v) * self.tex_scale,
            octaves,
            self.tex_seed,
        )
    }
}

/// World plane layout plus the sampled SfM points.
pub struct Scene {
    pub planes: Vec<Plane>,
    pub points: Vec<[f64; 3]>,
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn build_scene(cfg: &SynthConfig, rng: &mut ChaCha12Rng) -> Scene {
    let mut planes = Vec::new();
    // Background plane: fronto-parallel, large enough to fill the view from
    // anywhere on the trajectory.
    let z_back = rng.random_range(2.8..3.4);
    let fov_half = z_back * (cfg.image_width.max(cfg.image_height) as f64 / 2.0) / cfg.focal;
    let extent = fov_half * 2.2 + cfg.motion_translation * cfg.frames_per_sequence as f64;
    planes.push(Plane {
        origin: [0.0, 0.0, z_back],
        e1: [1.0, 0.0, 0.0],
        e2: [0.0, 1.0, 0.0],
        normal: [0.0, 0.0, -1.0],
        half_u: extent,
        half_v: extent,
        tex_seed: rng.random(),
        tex_scale: rng.random_range(6.0..10.0),
    });
    // Foreground planes: smaller, closer, mildly tilted occluders.
    for _ in 1..cfg.planes {
        let z = rng.random_range(1.7..2.3);
        let cx = rng.random_range(-0.5..0.5) * z * cfg.image_width as f64 / cfg.focal / 2.0;
        let cy = rng.random_range(-0.5..0.5) * z * cfg.image_height as f64 / cfg.focal / 2.0;
        let tilt_x = rng.random_range(-0.35..0.35);
        let tilt_y = rng.random_range(-0.35..0.35);
        let normal = normalize([tilt_x, tilt_y, -1.0]);
        let e1 = normalize(cross([0.0, 1.0, 0.0], normal));
        let e2 = normalize(cross(normal, e1));
        let span = z * cfg.image_width as f64 / cfg.focal / 2.0;
        planes.push(Plane {
            origin: [cx, cy, z],
            e1,
            e2,
            normal,
            half_u: rng.random_range(0.35..0.6) * span,
            half_v: rng.random_range(0.35..0.6) * span,
            tex_seed: rng.random(),
            tex_scale: rng.random_range(8.0..14.0),
        });
    }
    // SfM points sampled on plane surfaces.
    let mut points = Vec::with_capacity(cfg.sfm_points);
    for _ in 0..cfg.sfm_points {
        let p = &planes[rng.random_range(0..planes.len())];
        let u = rng.random_range(-p.half_u..p.half_u);
        let v = rng.random_range(-p.half_v..p.half_v);
        points.push([
            p.origin[0] + u * p.e1[0] + v * p.e2[0],
            p.origin[1] + u * p.e1[1] + v * p.e2[1],
            p.origin[2] + u * p.e1[2] + v * p.e2[2],
        ]);
    }
    Scene { planes, points }
}

fn rot_x(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn matmul3(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Camera-from-world pose for a camera at `center` with orientation
/// `R_cam = roll * pitch * yaw` relative to the world axes.
fn camera_pose(center: [f64; 3], yaw: f64, pitch: f64, roll: f64) -> CameraPose {
    // Rows of the camera-from-world rotation are the camera axes in world
    // coordinates; transpose of the world-from-camera orientation.
    let o = matmul3(rot_z(roll), matmul3(rot_x(pitch), rot_y(yaw)));
    let r = [
        [o[0][0], o[1][0], o[2][0]],
        [o[0][1], o[1][1], o[2][1]],
        [o[0][2], o[1][2], o[2][2]],
    ];
    let pose = CameraPose {
        rotation: r,
        translation: [0.0; 3],
    };
    let t = pose.transform([center[0], center[1], center[2]]);
    CameraPose {
        rotation: r,
        translation: [-t[0], -t[1], -t[2]],
    }
}

/// Render one view: image intensity in [0, 1] and exact depth (0 where no
/// plane is hit). The nearest intersection wins, which makes occlusion exact.
pub fn render_view(
    scene: &Scene,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    width: usize,
    height: usize,
    octaves: usize,
) -> (Grid<f32>, Grid<f32>) {
    let inv = pose.inverse();
    let origin = inv.translation;
    let mut image = Grid::new(width, height, 0.0f32);
    let mut depth = Grid::new(width, height, 0.0f32);
    for y in 0..height {
        for x in 0..width {
            let dc = [
                (x as f64 - intrinsics.cx) / intrinsics.fx,
                (y as f64 - intrinsics.cy) / intrinsics.fy,
                1.0,
            ];
            // World direction with unit camera-z so t equals camera depth.
            let dir = [
                inv.rotation[0][0] * dc[0] + inv.rotation[0][1] * dc[1] + inv.rotation[0][2],
                inv.rotation[1][0] * dc[0] + inv.rotation[1][1] * dc[1] + inv.rotation[1][2],
                inv.rotation[2][0] * dc[0] + inv.rotation[2][1] * dc[1] + inv.rotation[2][2],
            ];
            let mut best: Option<(f64, f64)> = None; // (depth, intensity)
            for plane in &scene.planes {
                if let Some((t, u, v)) = plane.intersect(origin, dir) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, plane.texture(u, v, octaves)));
                    }
                }
            }
            if let Some((t, tex)) = best {
                depth.set(x, y, t as f32);
                image.set(x, y, tex as f32);
            }
        }
    }
    (image, depth)
}

/// Sampled camera trajectory. Odd frames get the configured extra roll, so a
/// nonzero `roll_deg` yields pairs with known in-plane rotation.
pub fn sample_trajectory(cfg: &SynthConfig, rng: &mut ChaCha12Rng) -> Vec<CameraPose> {
    let mr = cfg.motion_rotation_deg.to_radians();
    let mt = cfg.motion_translation;
    let mut center = [0.0, 0.0, 0.0];
    let mut yaw = 0.0;
    let mut pitch = 0.0;
    (0..cfg.frames_per_sequence)
        .map(|i| {
            if i > 0 {
                center[0] += rng.random_range(-mt..mt);
                center[1] += rng.random_range(-mt..mt);
                center[2] += rng.random_range(-mt..mt) * 0.5;
                yaw += rng.random_range(-mr..mr);
                pitch += rng.random_range(-mr..mr);
            }
            let roll = if i % 2 == 1 {
                cfg.roll_deg.to_radians()
            } else {
                0.0
            };
            camera_pose(center, yaw, pitch, roll)
        })
        .collect()
}

/// Generate one sequence directory: frames (PGM + depth raster) and a
/// manifest. Deterministic for a given seed; the camera is re-sampled (up to
/// 20 times) whenever a view sees too little of the scene.
pub fn synth_scene(
    out_dir: &Path,
    scene_name: &str,
    split: &str,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<SequenceManifest> {
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let scene = build_scene(cfg, &mut rng);
    let intrinsics = CameraIntrinsics {
        fx: cfg.focal,
        fy: cfg.focal,
        cx: (cfg.image_width as f64 - 1.0) / 2.0,
        cy: (cfg.image_height as f64 - 1.0) / 2.0,
    };
    // Cheap coverage probe at 16x16 with proportionally scaled intrinsics.
    let probe = CameraIntrinsics {
        fx: cfg.focal * 16.0 / cfg.image_width as f64,
        fy: cfg.focal * 16.0 / cfg.image_height as f64,
        cx: 7.5,
        cy: 7.5,
    };
    let mut frames = Vec::new();
    let mut poses = sample_trajectory(cfg, &mut rng);
    for attempt in 0..20 {
        let coverage_ok = |pose: &CameraPose| {
            let (_, depth) = render_view(&scene, &probe, pose, 16, 16, 1);
            let hits = depth.data.iter().filter(|&&z| z > 0.0).count();
            hits * 10 >= depth.data.len() * 7
        };
        if poses.iter().all(coverage_ok) {
            break;
        }
        if attempt == 19 {
            return Err(Error::Data(
                "could not sample a trajectory that keeps the scene in view".into(),
            ));
        }
        poses = sample_trajectory(cfg, &mut rng);
    }
    for (i, pose) in poses.iter().enumerate() {
        let (image, depth) = render_view(
            &scene,
            &intrinsics,
            pose,
            cfg.image_width,
            cfg.image_height,
            cfg.texture_octaves,
        );
        let image_u8 = image.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
        let image_name = format!("frame_{i:03}.pgm");
        let depth_name = format!("frame_{i:03}.lfdz");
        super::formats::write_pgm(&out_dir.join(&image_name), &image_u8)?;
        super::formats::write_depth(&out_dir.join(&depth_name), &depth)?;
        frames.push(ManifestFrame {
            image: image_name,
            depth: depth_name,
            intrinsics,
            pose: PoseJson::from_pose(pose),
        });
    }
    let manifest = SequenceManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        scene: scene_name.to_string(),
        split: split.to_string(),
        frames,
        sfm_points: scene.points.clone(),
    };
    save_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

/// Generate a whole dataset under `root`: `cfg.sequences` sequences, the
/// last `val_fraction` of them tagged "val". Fails on an existing non-empty
/// target.
pub fn synth_dataset(root: &Path, cfg: &SynthConfig, base_seed: u64) -> Result<Vec<PathBuf>> {
    if root.exists() && root.read_dir()?.next().is_some() {
        return Err(Error::Data(format!(
            "output directory {} exists and is not empty",
            root.display()
        )));
    }
    std::fs::create_dir_all(root)?;
    let n_val = ((cfg.sequences as f64 * cfg.val_fraction).round() as usize).min(cfg.sequences);
    let mut dirs = Vec::new();
    for i in 0..cfg.sequences {
        let split = if i >= cfg.sequences - n_val { "val" } else { "train" };
        let name = format!("seq_{i:03}");
        let dir = root.join(&name);
        synth_scene(&dir, &name, split, cfg, splitmix(base_seed ^ i as u64))?;
        dirs.push(dir);
    }
    Ok(dirs)
}
