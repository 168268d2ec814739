//! Matching-score evaluation: feature extraction at inference settings,
//! nearest-neighbor matching, ground-truth verification through depth and
//! pose, threshold and rotation sweeps, and a per-keypoint timing bench.

pub mod features;
pub mod viz;

use crate::config::{ArchConfig, EvalConfig, Mode};
use crate::descriptor::{crop_patches, describe};
use crate::detector::{detector_forward, select_keypoints, Keypoint};
use crate::geometry::{occlusion_check_reprojected, reproject_with_depth, FrameRecord};
use crate::model::{Binder, BnMode, ModelParams};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Keypoints plus row-major descriptor storage.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<f32>,
    pub dim: usize,
    pub tag: String,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Run the full pipeline on one frame at inference settings (running BN
/// statistics, no gradients) and return `k` keypoints with descriptors.
pub fn extract_features(
    params: &ModelParams<f32>,
    frame: &FrameRecord,
    arch: &ArchConfig,
    mode: Mode,
    k: usize,
) -> Result<FeatureSet> {
    let mut b = Binder::<f32>::new(BnMode::Eval, false, arch.bn_eps);
    let (h, w) = (frame.height(), frame.width());
    let image = b
        .tape
        .constant(frame.image.data.clone(), &[1, h, w, 1])?;
    let outputs = detector_forward(&mut b, image, &params.detector, arch)?;
    let margin = arch.keypoint_margin();
    let selected = select_keypoints(&mut b.tape, &outputs, k, margin, arch)?;
    let (log_scales, thetas) = match mode {
        Mode::RotScl => (selected.log_scales, selected.thetas),
        Mode::NoRotScl => {
            let zeros_s = b.tape.constant(vec![0.0f32; k], &[k])?;
            let zeros_t = b.tape.constant(vec![0.0f32; k], &[k])?;
            (zeros_s, zeros_t)
        }
    };
    let patches = crop_patches(
        &mut b,
        image,
        selected.xs,
        selected.ys,
        log_scales,
        thetas,
        arch,
        None,
    )?;
    let descs = describe(&mut b, patches, &params.descriptor)?;
    let xs = b.tape.value(selected.xs).to_vec();
    let ys = b.tape.value(selected.ys).to_vec();
    let ls = b.tape.value(log_scales).to_vec();
    let th = b.tape.value(thetas).to_vec();
    let keypoints = (0..k)
        .map(|i| Keypoint {
            x: xs[i],
            y: ys[i],
            scale: ls[i].exp(),
            orientation: th[i],
            score: selected.scores[i] as f32,
        })
        .collect();
    Ok(FeatureSet {
        keypoints,
        descriptors: b.tape.value(descs).to_vec(),
        dim: arch.descriptor_dim,
        tag: "localfeat".to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub distance: f32,
}

/// Nearest-neighbor matching by descriptor l2 distance, one match per
/// A-keypoint, ties broken by lowest index. `mutual` keeps only matches that
/// are also nearest in the reverse direction.
pub fn match_nn(a: &FeatureSet, b: &FeatureSet, mutual: bool) -> Result<Vec<Match>> {
    if !a.is_empty() && !b.is_empty() && a.dim != b.dim {
        return Err(Error::Eval(format!(
            "descriptor dims differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Ok(Vec::new());
    }
    let nearest = |set_from: &FeatureSet, set_to: &FeatureSet, i: usize| -> (usize, f32) {
        let q = set_from.descriptor(i);
        let mut best = (0usize, f32::INFINITY);
        for j in 0..set_to.len() {
            let d: f32 = q
                .iter()
                .zip(set_to.descriptor(j))
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    };
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let (j, d) = nearest(a, b, i);
        if mutual {
            let (back, _) = nearest(b, a, j);
            if back != i {
                continue;
            }
        }
        out.push(Match {
            a: i,
            b: j,
            distance: d.sqrt(),
        });
    }
    Ok(out)
}

/// Per-pair evaluation counts. `score` is `None` when no match had
/// resolvable ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairOutcome {
    pub n_keypoints_a: usize,
    pub n_keypoints_b: usize,
    pub n_matches: usize,
    pub n_resolvable: usize,
    pub n_correct: usize,
    pub score: Option<f64>,
}

/// Classify each match: `None` when the A-keypoint has no valid depth
/// (unresolvable ground truth), otherwise whether the reprojection lands
/// within `threshold_px` of the matched B-keypoint and passes the occlusion
/// check.
pub fn classify_matches(
    matches: &[Match],
    a: &FeatureSet,
    b: &FeatureSet,
    frame_a: &FrameRecord,
    frame_b: &FrameRecord,
    threshold_px: f64,
    occlusion_rel_tol: f64,
) -> Vec<Option<bool>> {
    matches
        .iter()
        .map(|m| {
            let ka = a.keypoints[m.a];
            let z = frame_a.depth_at(ka.x as f64, ka.y as f64)?;
            let rep = reproject_with_depth(ka.x as f64, ka.y as f64, z, frame_a, frame_b);
            if !rep.valid {
                return Some(false);
            }
            if !occlusion_check_reprojected(&rep, frame_b, occlusion_rel_tol) {
                return Some(false);
            }
            let kb = b.keypoints[m.b];
            let dist = ((rep.x - kb.x as f64).powi(2) + (rep.y - kb.y as f64).powi(2)).sqrt();
            Some(dist <= threshold_px)
        })
        .collect()
}

/// Matching score: correct matches over matches with resolvable ground
/// truth.
pub fn matching_score(
    matches: &[Match],
    a: &FeatureSet,
    b: &FeatureSet,
    frame_a: &FrameRecord,
    frame_b: &FrameRecord,
    threshold_px: f64,
    occlusion_rel_tol: f64,
) -> PairOutcome {
    let classes = classify_matches(matches, a, b, frame_a, frame_b, threshold_px, occlusion_rel_tol);
    let n_resolvable = classes.iter().filter(|c| c.is_some()).count();
    let n_correct = classes.iter().filter(|c| **c == Some(true)).count();
    PairOutcome {
        n_keypoints_a: a.len(),
        n_keypoints_b: b.len(),
        n_matches: matches.len(),
        n_resolvable,
        n_correct,
        score: (n_resolvable > 0).then(|| n_correct as f64 / n_resolvable as f64),
    }
}

/// Extract, match, and score one frame pair with a model.
pub fn score_pair_with_model(
    params: &ModelParams<f32>,
    arch: &ArchConfig,
    mode: Mode,
    eval_cfg: &EvalConfig,
    frame_a: &FrameRecord,
    frame_b: &FrameRecord,
) -> Result<(PairOutcome, FeatureSet, FeatureSet, Vec<Match>)> {
    let fa = extract_features(params, frame_a, arch, mode, eval_cfg.keypoints)?;
    let fb = extract_features(params, frame_b, arch, mode, eval_cfg.keypoints)?;
    let matches = match_nn(&fa, &fb, eval_cfg.mutual)?;
    let outcome = matching_score(
        &matches,
        &fa,
        &fb,
        frame_a,
        frame_b,
        eval_cfg.threshold_px,
        0.05,
    );
    Ok((outcome, fa, fb, matches))
}

/// Matching score of already-computed matches at multiple pixel thresholds
/// (ascending).
pub fn threshold_sweep(
    matches: &[Match],
    a: &FeatureSet,
    b: &FeatureSet,
    frame_a: &FrameRecord,
    frame_b: &FrameRecord,
    thresholds: &[f64],
    occlusion_rel_tol: f64,
) -> Result<Vec<(f64, PairOutcome)>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Eval("thresholds must be ascending".into()));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            (
                t,
                matching_score(matches, a, b, frame_a, frame_b, t, occlusion_rel_tol),
            )
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RotationBin {
    pub degrees: usize,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RotationReport {
    pub bins: Vec<RotationBin>,
    pub average: Option<f64>,
}

/// Matching score under in-plane rotations of the second image, every
/// `step_deg` from 0 to 360 (exclusive), pose roll composed accordingly.
pub fn rotation_benchmark(
    params: &ModelParams<f32>,
    arch: &ArchConfig,
    mode: Mode,
    eval_cfg: &EvalConfig,
    pairs: &[(FrameRecord, FrameRecord)],
    step_deg: usize,
) -> Result<RotationReport> {
    if step_deg == 0 || 360 % step_deg != 0 {
        return Err(Error::Eval("rotation step must divide 360".into()));
    }
    let mut bins = Vec::new();
    for deg in (0..360).step_by(step_deg) {
        let mut scores = Vec::new();
        for (fa, fb) in pairs {
            let rotated = crate::trainer::augment::rotate_frame(fb, (deg as f64).to_radians())?;
            let (outcome, ..) = score_pair_with_model(params, arch, mode, eval_cfg, fa, &rotated)?;
            if let Some(s) = outcome.score {
                scores.push(s);
            }
        }
        bins.push(RotationBin {
            degrees: deg,
            score: (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
        });
    }
    let defined: Vec<f64> = bins.iter().filter_map(|b| b.score).collect();
    Ok(RotationReport {
        average: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        bins,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingCell {
    pub width: usize,
    pub height: usize,
    pub keypoints: usize,
    pub micros_per_keypoint: f64,
}

/// Median wall-clock cost of a full extraction divided by the keypoint
/// count, per image size and K. One warm-up run per cell is discarded.
pub fn timing_bench(
    params: &ModelParams<f32>,
    arch: &ArchConfig,
    mode: Mode,
    sizes: &[(usize, usize)],
    keypoint_counts: &[usize],
    trials: usize,
) -> Result<Vec<TimingCell>> {
    use crate::data::synth::value_noise;
    use crate::grid::Grid;
    let mut cells = Vec::new();
    for &(w, h) in sizes {
        let mut img = Grid::new(w, h, 0.0f32);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, value_noise(x as f64 / 9.0, y as f64 / 9.0, 4, 7) as f32);
            }
        }
        let frame = FrameRecord {
            image: crate::data::normalize_grid(&img, None),
            image_u8: img.map(|v| (v * 255.0) as u8),
            depth: Grid::new(w, h, 1.0),
            valid: Grid::new(w, h, true),
            intrinsics: crate::geometry::CameraIntrinsics {
                fx: w as f64,
                fy: w as f64,
                cx: (w as f64 - 1.0) / 2.0,
                cy: (h as f64 - 1.0) / 2.0,
            },
            pose: crate::geometry::CameraPose::identity(),
        };
        for &k in keypoint_counts {
            extract_features(params, &frame, arch, mode, k)?; // warm-up
            let mut times: Vec<f64> = (0..trials.max(1))
                .map(|_| {
                    let t0 = std::time::Instant::now();
                    let _ = extract_features(params, &frame, arch, mode, k);
                    t0.elapsed().as_secs_f64()
                })
                .collect();
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = times[times.len() / 2];
            cells.push(TimingCell {
                width: w,
                height: h,
                keypoints: k,
                micros_per_keypoint: median * 1e6 / k as f64,
            });
        }
    }
    Ok(cells)
}

/// One line of the per-pair evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairReport {
    pub sequence: String,
    pub frame_a: usize,
    pub frame_b: usize,
    pub outcome: PairOutcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<(f64, PairOutcome)>>,
}

/// Aggregate over an evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub pairs: usize,
    pub pairs_scored: usize,
    pub mean_matching_score: Option<f64>,
    pub threshold_px: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_means: Option<Vec<(f64, f64)>>,
}

pub fn aggregate(reports: &[PairReport], threshold_px: f64) -> AggregateReport {
    let scored: Vec<f64> = reports.iter().filter_map(|r| r.outcome.score).collect();
    let sweep_means = reports
        .iter()
        .filter_map(|r| r.sweep.as_ref())
        .fold(None::<std::collections::BTreeMap<u64, Vec<f64>>>, |acc, sweep| {
            let mut map = acc.unwrap_or_default();
            for (t, o) in sweep {
                if let Some(s) = o.score {
                    map.entry(t.to_bits()).or_default().push(s);
                }
            }
            Some(map)
        })
        .map(|map| {
            map.into_iter()
                .map(|(bits, v)| (f64::from_bits(bits), v.iter().sum::<f64>() / v.len() as f64))
                .collect::<Vec<_>>()
        });
    AggregateReport {
        pairs: reports.len(),
        pairs_scored: scored.len(),
        mean_matching_score: (!scored.is_empty())
            .then(|| scored.iter().sum::<f64>() / scored.len() as f64),
        threshold_px,
        sweep_means,
    }
}

#[cfg(test)]
mod tests;
