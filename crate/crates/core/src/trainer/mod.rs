//! Asymmetric two-branch training: a lagged copy of the network builds
//! supervision on one image without gradients, the live copy is optimized on
//! the other, roles swap, and the two directions' gradients are averaged
//! before one Adam step. The post-update parameters become the next step's
//! lagged copy.

pub mod adam;
pub mod augment;
pub mod checkpoint;

use crate::config::RunConfig;
use crate::data::{crop_training_pair, load_frame, sample_pairs, Dataset, PairMode};
use crate::descriptor::{crop_patches, describe};
use crate::detector::{detector_forward, select_keypoints, DetectorOutputs};
use crate::diff::{BnStats, Tape, TensorId};
use crate::geometry::{
    clean_target, occlusion_check_reprojected, relative_pose, reproject_with_depth, roll_angle,
    scale_transport, warp_score_map, wrap_angle, FrameRecord,
};
use crate::grid::Grid;
use crate::losses::{
    detector_loss, geom_loss, image_loss, mine_negatives, pair_loss, triplet_loss,
    CorrespondenceBatch,
};
use crate::model::{Binder, BnMode, ModelParams};
use crate::{Error, Result};
use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Loss components averaged over the directions that contributed to a step.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_im: f64,
    pub l_pair: f64,
    pub l_geom: f64,
    pub l_tri: f64,
    pub l_det: f64,
    pub l_desc: f64,
}

impl StepLosses {
    pub fn total(&self) -> f64 {
        self.l_det + self.l_desc
    }
}

/// One line of the training metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub l_im: f64,
    pub l_pair: f64,
    pub l_geom: f64,
    pub l_tri: f64,
    pub l_det: f64,
    pub l_desc: f64,
    pub val_matching_score: Option<f64>,
}

type NamedGrads = BTreeMap<String, Vec<f32>>;

/// Dense branch-j products, detached from any gradient bookkeeping.
struct LaggedView {
    score_map: Grid<f32>,
    theta_map: Grid<f32>,
    /// Row-major `[h][w][n]` per-level responses.
    stack: Vec<f32>,
    level_log_scales: Vec<f64>,
    width: usize,
    /// Every parameter registered without gradient tracking.
    all_frozen: bool,
}

fn lagged_dense_pass(
    lagged: &ModelParams<f32>,
    frame: &FrameRecord,
    cfg: &RunConfig,
) -> Result<LaggedView> {
    let mut b = Binder::<f32>::new(BnMode::Train, false, cfg.arch.bn_eps);
    let (h, w) = (frame.height(), frame.width());
    let image = b.tape.constant(frame.image.data.clone(), &[1, h, w, 1])?;
    let outputs = detector_forward(&mut b, image, &lagged.detector, &cfg.arch)?;
    let all_frozen = b.bound_flags().iter().all(|(_, rg)| !rg);
    Ok(LaggedView {
        score_map: Grid::from_vec(w, h, b.tape.value(outputs.score_map).to_vec()),
        theta_map: Grid::from_vec(w, h, b.tape.value(outputs.theta_map).to_vec()),
        stack: b.tape.value(outputs.score_stack).to_vec(),
        level_log_scales: outputs.level_scales.iter().map(|s| s.ln()).collect(),
        width: w,
        all_frozen,
    })
}

impl LaggedView {
    /// Scale and orientation read from the lagged maps at an integer pixel,
    /// the scale via the same softargmax-over-log-scales as the live path.
    fn attrs_at(&self, x: usize, y: usize, temp: f64) -> (f64, f64) {
        let n = self.level_log_scales.len();
        let row = &self.stack[(y * self.width + x) * n..(y * self.width + x + 1) * n];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut z = 0.0;
        let mut acc = 0.0;
        for (v, ls) in row.iter().zip(&self.level_log_scales) {
            let e = ((*v as f64 - m) / temp).exp();
            z += e;
            acc += e * ls;
        }
        (acc / z, self.theta_map.get(x, y) as f64)
    }
}

/// Everything one direction (supervise live branch on `frame_i` from the
/// lagged branch on `frame_j`) contributes to the step.
pub struct DirectionOutcome {
    pub grads: NamedGrads,
    pub bn_obs: Vec<(String, BnStats<f32>)>,
    pub losses: StepLosses,
    pub n_correspondences: usize,
    /// True when no lagged-branch parameter tracked gradients.
    pub lagged_frozen: bool,
}

/// Live keypoints warped into frame j, with targets transported back into
/// frame i's coordinates.
struct WarpedSet {
    warped_x: Vec<f64>,
    warped_y: Vec<f64>,
    valid: Vec<bool>,
    target_log_scales: Vec<f32>,
    target_thetas: Vec<f32>,
}

#[allow(clippy::too_many_arguments)]
fn warp_live_keypoints(
    tape: &Tape<f32>,
    xs: TensorId,
    ys: TensorId,
    frame_i: &FrameRecord,
    frame_j: &FrameRecord,
    lagged_j: &LaggedView,
    cfg: &RunConfig,
    margin_j: usize,
) -> WarpedSet {
    let k = tape.value(xs).len();
    let rel = relative_pose(&frame_i.pose, &frame_j.pose);
    let roll = roll_angle(&rel);
    let mut out = WarpedSet {
        warped_x: vec![0.0; k],
        warped_y: vec![0.0; k],
        valid: vec![false; k],
        target_log_scales: vec![0.0; k],
        target_thetas: vec![0.0; k],
    };
    let (wj, hj) = (frame_j.width() as f64, frame_j.height() as f64);
    let m = margin_j as f64;
    for i in 0..k {
        let x = tape.value(xs)[i] as f64;
        let y = tape.value(ys)[i] as f64;
        let z_i = match frame_i.depth_at(x, y) {
            Some(z) => z,
            None => continue,
        };
        let rep = reproject_with_depth(x, y, z_i, frame_i, frame_j);
        if !rep.valid
            || rep.x < m
            || rep.y < m
            || rep.x > wj - 1.0 - m
            || rep.y > hj - 1.0 - m
            || !occlusion_check_reprojected(&rep, frame_j, cfg.train.occlusion_rel_tol)
        {
            continue;
        }
        out.warped_x[i] = rep.x;
        out.warped_y[i] = rep.y;
        out.valid[i] = true;
        // Branch-j scale/orientation at the (rounded) warped pixel,
        // transported back into frame i so losses compare in one frame.
        let px = (rep.x.round() as usize).min(frame_j.width() - 1);
        let py = (rep.y.round() as usize).min(frame_j.height() - 1);
        let (log_s_j, theta_j) = lagged_j.attrs_at(px, py, cfg.arch.softargmax_temperature);
        let transport = scale_transport(&frame_i.intrinsics, &frame_j.intrinsics, z_i, rep.z);
        out.target_log_scales[i] = (log_s_j - transport.ln()) as f32;
        out.target_thetas[i] = wrap_angle(theta_j - roll) as f32;
    }
    out
}

/// Descriptors from the lagged branch at the warped locations on frame j.
fn lagged_descriptors(
    lagged: &ModelParams<f32>,
    frame_j: &FrameRecord,
    warped: &WarpedSet,
    rotscl: bool,
    lagged_j: &LaggedView,
    cfg: &RunConfig,
) -> Result<(Vec<f32>, bool)> {
    let k = warped.valid.len();
    let mut b = Binder::<f32>::new(BnMode::Train, false, cfg.arch.bn_eps);
    let (h, w) = (frame_j.height(), frame_j.width());
    let image = b.tape.constant(frame_j.image.data.clone(), &[1, h, w, 1])?;
    let mut xs = vec![0.0f32; k];
    let mut ys = vec![0.0f32; k];
    let mut log_scales = vec![0.0f32; k];
    let mut thetas = vec![0.0f32; k];
    for i in 0..k {
        if !warped.valid[i] {
            // Placeholder geometry; the row is masked out of every loss.
            xs[i] = (w / 2) as f32;
            ys[i] = (h / 2) as f32;
            continue;
        }
        xs[i] = warped.warped_x[i] as f32;
        ys[i] = warped.warped_y[i] as f32;
        if rotscl {
            let px = (warped.warped_x[i].round() as usize).min(w - 1);
            let py = (warped.warped_y[i].round() as usize).min(h - 1);
            let (ls, th) = lagged_j.attrs_at(px, py, cfg.arch.softargmax_temperature);
            log_scales[i] = ls as f32;
            thetas[i] = th as f32;
        }
    }
    let xs = b.tape.constant(xs, &[k])?;
    let ys = b.tape.constant(ys, &[k])?;
    let ls = b.tape.constant(log_scales, &[k])?;
    let th = b.tape.constant(thetas, &[k])?;
    let patches = crop_patches(&mut b, image, xs, ys, ls, th, &cfg.arch, None)?;
    let descs = describe(&mut b, patches, &lagged.descriptor)?;
    let frozen = b.bound_flags().iter().all(|(_, rg)| !rg);
    Ok((b.tape.value(descs).to_vec(), frozen))
}

/// One supervision direction: lagged branch on `frame_j` supervises the live
/// branch on `frame_i`. Returns `None` when the pair direction is skipped
/// (degenerate overlap or too few surviving correspondences).
pub fn direction_pass(
    live: &ModelParams<f32>,
    lagged: &ModelParams<f32>,
    frame_i: &FrameRecord,
    frame_j: &FrameRecord,
    cfg: &RunConfig,
    iteration: usize,
    mining_rng: &mut ChaCha12Rng,
) -> Result<Option<DirectionOutcome>> {
    let rotscl = cfg.rot_scl();
    let lagged_j = lagged_dense_pass(lagged, frame_j, cfg)?;

    let (warped_map, mask) = match warp_score_map(
        &lagged_j.score_map,
        frame_i,
        frame_j,
        cfg.train.occlusion_rel_tol,
    ) {
        Ok(v) => v,
        Err(Error::DegeneratePair(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let target = clean_target(
        &warped_map,
        &mask,
        cfg.train.keypoints,
        cfg.train.sigma,
        cfg.arch.nms_window,
    );

    // Live branch, gradients on.
    let mut b = Binder::<f32>::new(BnMode::Train, true, cfg.arch.bn_eps);
    let (h, w) = (frame_i.height(), frame_i.width());
    let image = b.tape.constant(frame_i.image.data.clone(), &[1, h, w, 1])?;
    let outputs: DetectorOutputs = detector_forward(&mut b, image, &live.detector, &cfg.arch)?;
    let mask_vec: Vec<bool> = mask.data.clone();
    let l_im = image_loss(&mut b.tape, outputs.score_map, &target.data, &mask_vec)?;

    let margin = cfg.arch.keypoint_margin();
    let selected = select_keypoints(&mut b.tape, &outputs, cfg.train.keypoints, margin, &cfg.arch)?;
    let k = selected.len();
    let (log_scales, thetas) = if rotscl {
        (selected.log_scales, selected.thetas)
    } else {
        let zs = b.tape.constant(vec![0.0f32; k], &[k])?;
        let zt = b.tape.constant(vec![0.0f32; k], &[k])?;
        (zs, zt)
    };

    let warped = warp_live_keypoints(
        &b.tape,
        selected.xs,
        selected.ys,
        frame_i,
        frame_j,
        &lagged_j,
        cfg,
        margin,
    );
    let n_correspondences = warped.valid.iter().filter(|&&v| v).count();
    if n_correspondences < cfg.train.min_correspondences.max(2) {
        log::warn!(
            "skipping pair direction at iteration {iteration}: {n_correspondences} correspondences"
        );
        return Ok(None);
    }

    let (target_descriptors, lagged_frozen) =
        lagged_descriptors(lagged, frame_j, &warped, rotscl, &lagged_j, cfg)?;
    let batch = CorrespondenceBatch {
        desc_dim: cfg.arch.descriptor_dim,
        target_descriptors,
        target_log_scales: warped.target_log_scales.clone(),
        target_thetas: warped.target_thetas.clone(),
        valid: warped.valid.clone(),
    };

    let patches = crop_patches(
        &mut b,
        image,
        selected.xs,
        selected.ys,
        log_scales,
        thetas,
        &cfg.arch,
        Some(margin),
    )?;
    let descriptors = describe(&mut b, patches, &live.descriptor)?;

    let l_pair = pair_loss(&mut b.tape, descriptors, &batch)?;
    let l_geom = if rotscl {
        Some(geom_loss(
            &mut b.tape,
            log_scales,
            thetas,
            &batch,
            &cfg.train.weights,
        )?)
    } else {
        None
    };
    let anchors = b.tape.value(descriptors).to_vec();
    let negatives = mine_negatives(&anchors, &batch, iteration, &cfg.train.weights, mining_rng);
    let l_tri = triplet_loss(
        &mut b.tape,
        descriptors,
        &batch,
        &negatives,
        cfg.train.weights.margin,
    )?;
    let l_det = detector_loss(&mut b.tape, l_im, l_pair, l_geom, &cfg.train.weights)?;
    let l_desc = crate::losses::descriptor_loss(l_tri);

    // Two backward passes: detector parameters take gradients only from
    // L_det, descriptor parameters only from L_desc.
    let det_grads = b.tape.backward(l_det)?;
    let desc_grads = b.tape.backward(l_desc)?;
    let mut grads: NamedGrads = BTreeMap::new();
    for (name, g) in b.named_grads(&det_grads) {
        if name.starts_with("detector.") {
            grads.insert(name, g);
        }
    }
    for (name, g) in b.named_grads(&desc_grads) {
        if name.starts_with("descriptor.") {
            grads.insert(name, g);
        }
    }

    let losses = StepLosses {
        l_im: b.tape.scalar_value(l_im) as f64,
        l_pair: b.tape.scalar_value(l_pair) as f64,
        l_geom: l_geom.map_or(0.0, |g| b.tape.scalar_value(g) as f64),
        l_tri: b.tape.scalar_value(l_tri) as f64,
        l_det: b.tape.scalar_value(l_det) as f64,
        l_desc: b.tape.scalar_value(l_desc) as f64,
    };
    let mut bn_b = b;
    let bn_obs = bn_b.take_bn_observations();
    Ok(Some(DirectionOutcome {
        grads,
        bn_obs,
        losses,
        n_correspondences,
        lagged_frozen: lagged_frozen && lagged_j.all_frozen,
    }))
}

/// One optimization step over a batch of frame pairs: both directions per
/// pair, gradients averaged, one Adam update, iteration counter advanced.
/// The lagged copy is the parameters as of the start of the step.
pub fn train_step(
    pairs: &[(FrameRecord, FrameRecord)],
    state: &mut Checkpoint,
    cfg: &RunConfig,
) -> Result<StepLosses> {
    let lagged = state.params.clone();
    let mut outcomes: Vec<DirectionOutcome> = Vec::new();
    for (pi, (fa, fb)) in pairs.iter().enumerate() {
        for (fi, fj, tag) in [(fa, fb, 0usize), (fb, fa, 1usize)] {
            let mut mining_rng = ChaCha12Rng::seed_from_u64(
                splitmix(cfg.seed ^ state.iteration as u64)
                    ^ splitmix(0x6d696e65 ^ (pi as u64) << 1 ^ tag as u64),
            );
            if let Some(outcome) = direction_pass(
                &state.params,
                &lagged,
                fi,
                fj,
                cfg,
                state.iteration,
                &mut mining_rng,
            )? {
                outcomes.push(outcome);
            }
        }
    }
    if outcomes.is_empty() {
        return Err(Error::Train(format!(
            "every pair in the batch was skipped at iteration {}",
            state.iteration
        )));
    }

    // Average gradients over contributing directions.
    let denom = outcomes.len() as f32;
    let mut summed: NamedGrads = BTreeMap::new();
    for outcome in &outcomes {
        for (name, g) in &outcome.grads {
            match summed.get_mut(name) {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                None => {
                    summed.insert(name.clone(), g.clone());
                }
            }
        }
    }
    for g in summed.values_mut() {
        for v in g.iter_mut() {
            *v /= denom;
        }
    }

    let adam_cfg = AdamConfig {
        learning_rate: cfg.train.learning_rate,
        beta1: cfg.train.adam_beta1,
        beta2: cfg.train.adam_beta2,
        eps: cfg.train.adam_eps,
    };
    let adam = &mut state.adam;
    adam.advance();
    state.params.visit_mut(|name, p| {
        if let Some(grad) = summed.get(name) {
            adam.update_param(&adam_cfg, name, &mut p.data, grad);
        }
    });

    // Merge BN observations across directions into the running statistics.
    let mut obs: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for outcome in &outcomes {
        for (name, stats) in &outcome.bn_obs {
            let entry = obs.entry(name.clone()).or_insert_with(|| {
                (vec![0.0; stats.mean.len()], vec![0.0; stats.var.len()], 0)
            });
            for (a, &m) in entry.0.iter_mut().zip(&stats.mean) {
                *a += m as f64;
            }
            for (a, &v) in entry.1.iter_mut().zip(&stats.var) {
                *a += v as f64;
            }
            entry.2 += 1;
        }
    }
    let momentum = cfg.arch.bn_momentum;
    state.params.visit_state_mut(|name, s| {
        let (layer, field) = match name.rsplit_once('.') {
            Some(parts) => parts,
            None => return,
        };
        if let Some((means, vars, n)) = obs.get(layer) {
            let src = if field == "running_mean" { means } else { vars };
            for (r, &v) in s.iter_mut().zip(src) {
                let observed = v / *n as f64;
                *r = (momentum * *r as f64 + (1.0 - momentum) * observed) as f32;
            }
        }
    });

    state.iteration += 1;
    let n = outcomes.len() as f64;
    let mut avg = StepLosses::default();
    for o in &outcomes {
        avg.l_im += o.losses.l_im / n;
        avg.l_pair += o.losses.l_pair / n;
        avg.l_geom += o.losses.l_geom / n;
        avg.l_tri += o.losses.l_tri / n;
        avg.l_det += o.losses.l_det / n;
        avg.l_desc += o.losses.l_desc / n;
    }
    Ok(avg)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Per-step RNG derived from the seed and iteration, so resuming from a
/// checkpoint replays the identical stream.
pub fn step_rng(seed: u64, iteration: usize, stream: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(splitmix(seed ^ splitmix(iteration as u64) ^ (stream << 48)))
}

/// In-memory training corpus: frames of every train/val sequence plus the
/// sampled pair lists.
pub struct TrainCorpus {
    pub train_frames: Vec<Vec<FrameRecord>>,
    pub train_pairs: Vec<(usize, usize, usize)>,
    pub val_frames: Vec<Vec<FrameRecord>>,
    pub val_pairs: Vec<(usize, usize, usize)>,
}

impl TrainCorpus {
    pub fn load(dataset: &Dataset, cfg: &RunConfig) -> Result<TrainCorpus> {
        let mut corpus = TrainCorpus {
            train_frames: Vec::new(),
            train_pairs: Vec::new(),
            val_frames: Vec::new(),
            val_pairs: Vec::new(),
        };
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        for (dir, manifest) in &dataset.sequences {
            let frames: Vec<FrameRecord> = manifest
                .frames
                .iter()
                .map(|f| load_frame(dir, f))
                .collect::<Result<_>>()?;
            let gap = cfg.train.frame_gap.min(frames.len().saturating_sub(1)).max(1);
            let pairs = sample_pairs(manifest, &frames, &PairMode::FrameGap(gap), None, &mut rng)?;
            let (frame_store, pair_store) = if manifest.split == "val" {
                (&mut corpus.val_frames, &mut corpus.val_pairs)
            } else {
                (&mut corpus.train_frames, &mut corpus.train_pairs)
            };
            let seq_idx = frame_store.len();
            frame_store.push(frames);
            pair_store.extend(pairs.iter().map(|p| (seq_idx, p.a, p.b)));
        }
        if corpus.train_pairs.is_empty() {
            return Err(Error::Data("no training pairs in dataset".into()));
        }
        Ok(corpus)
    }
}

/// Mean validation matching score with the current parameters.
pub fn validation_score(state: &Checkpoint, corpus: &TrainCorpus, cfg: &RunConfig) -> Option<f64> {
    let mut scores = Vec::new();
    for &(seq, a, b) in &corpus.val_pairs {
        let fa = &corpus.val_frames[seq][a];
        let fb = &corpus.val_frames[seq][b];
        if let Ok((outcome, ..)) = crate::eval::score_pair_with_model(
            &state.params,
            &cfg.arch,
            cfg.mode,
            &cfg.eval,
            fa,
            fb,
        ) {
            if let Some(s) = outcome.score {
                scores.push(s);
            }
        }
    }
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Full training run: iterate [`train_step`] over shuffled crop pairs,
/// log metrics, periodically score the validation split and write
/// checkpoints. Returns the final state and the metrics log.
pub fn train_loop(
    dataset: &Dataset,
    cfg: &RunConfig,
    resume: Option<Checkpoint>,
    out_dir: Option<&Path>,
) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
    let corpus = TrainCorpus::load(dataset, cfg)?;
    let mut state = resume.unwrap_or_else(|| Checkpoint {
        params: ModelParams::init(&cfg.arch, cfg.seed),
        adam: AdamState::new(),
        iteration: 0,
    });
    let mut metrics = Vec::new();
    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };

    while state.iteration < cfg.train.max_iterations {
        let iteration = state.iteration;
        let mut pair_rng = step_rng(cfg.seed, iteration, 1);
        let mut crops = Vec::new();
        let mut guard = 0;
        while crops.len() < cfg.train.pairs_per_batch {
            guard += 1;
            if guard > cfg.train.pairs_per_batch * 20 {
                break;
            }
            let (seq, a, b) = corpus.train_pairs[pair_rng.random_range(0..corpus.train_pairs.len())];
            let fa = &corpus.train_frames[seq][a];
            let fb = &corpus.train_frames[seq][b];
            let size = cfg.train.crop_size.min(fa.width().min(fa.height()));
            let cropped = if size < fa.width() || size < fa.height() {
                crop_training_pair(fa, fb, size, &mut pair_rng)?
            } else {
                Some((fa.clone(), fb.clone()))
            };
            let Some((ca, cb)) = cropped else { continue };
            let pair = if cfg.rot_scl() {
                let mut aug_rng = step_rng(cfg.seed, iteration, 2 + crops.len() as u64);
                augment::augment_pair(ca, cb, true, true, &mut aug_rng)?
            } else {
                (ca, cb)
            };
            crops.push(pair);
        }
        if crops.is_empty() {
            return Err(Error::Train(format!(
                "could not draw any usable crop pair at iteration {iteration}"
            )));
        }

        let losses = train_step(&crops, &mut state, cfg)?;
        let val = if cfg.train.val_interval > 0
            && (state.iteration % cfg.train.val_interval == 0
                || state.iteration == cfg.train.max_iterations)
        {
            validation_score(&state, &corpus, cfg)
        } else {
            None
        };
        let record = MetricsRecord {
            iteration: state.iteration,
            l_im: losses.l_im,
            l_pair: losses.l_pair,
            l_geom: losses.l_geom,
            l_tri: losses.l_tri,
            l_det: losses.l_det,
            l_desc: losses.l_desc,
            val_matching_score: val,
        };
        if let Some(f) = metrics_file.as_mut() {
            use std::io::Write;
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        metrics.push(record);

        if let Some(dir) = out_dir {
            let at_interval = cfg.train.checkpoint_interval > 0
                && state.iteration % cfg.train.checkpoint_interval == 0;
            if at_interval || state.iteration == cfg.train.max_iterations {
                checkpoint::save(
                    &dir.join(format!("checkpoint_{:06}.ckpt", state.iteration)),
                    &state,
                    &cfg.arch,
                )?;
            }
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&dir.join("checkpoint_final.ckpt"), &state, &cfg.arch)?;
    }
    Ok((state, metrics))
}

#[cfg(test)]
mod tests;
