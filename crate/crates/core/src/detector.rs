//! Multi-scale fully convolutional keypoint detector: shared feature map,
//! per-scale score maps merged into one scale-invariant map, dense
//! orientation, and differentiable top-K keypoint selection with sub-pixel
//! refinement.

use crate::config::ArchConfig;
use crate::diff::{Scalar, Tape, TensorId};
use crate::model::{Binder, DetectorParams};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// A detected keypoint: sub-pixel location, scale ratio, orientation in
/// radians wrapped to `(-pi, pi]`, and detection score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub scale: f32,
    pub orientation: f32,
    pub score: f32,
}

/// Log-spaced scale values in `[1/R, R]` with reciprocal endpoints.
/// A single level collapses to scale 1.
pub fn level_scales(n: usize, r: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64; // 0..1
            r.powf(2.0 * t - 1.0)
        })
        .collect()
}

/// Tape handles for everything the detector produces on one image.
pub struct DetectorOutputs {
    /// `[1, h, w, c]` shared representation.
    pub feature_map: TensorId,
    /// `[1, h, w, n]`: per-level score maps, all at input resolution.
    pub score_stack: TensorId,
    /// `[1, h, w, 1]`: the merged scale-invariant score map.
    pub score_map: TensorId,
    /// `[1, h, w, 1]`: dense orientation in radians.
    pub theta_map: TensorId,
    /// Scale value of each stack level.
    pub level_scales: Vec<f64>,
}

/// Backbone: three 5x5 conv blocks with BN and leaky ReLU, all at the input
/// resolution. The first block has no skip connection (it changes channel
/// count); the rest are residual.
pub fn feature_map<T: Scalar>(
    b: &mut Binder<T>,
    image: TensorId,
    params: &DetectorParams<T>,
    arch: &ArchConfig,
) -> Result<TensorId> {
    let shape = b.tape.shape(image).to_vec();
    if shape.len() != 4 || shape[1] < 32 || shape[2] < 32 {
        return Err(Error::invalid(
            "feature_map",
            format!("image must be [1, h, w, 1] with h, w >= 32, got {shape:?}"),
        ));
    }
    let slope = T::of(arch.leaky_slope);
    let mut x = image;
    for (i, block) in params.blocks.iter().enumerate() {
        let name = format!("detector.block{i}");
        let c1 = b.conv(&format!("{name}.conv1"), &block.conv1, x, 1)?;
        let n1 = b.bn(&format!("{name}.bn"), &block.bn, c1)?;
        let a1 = b.tape.leaky_relu(n1, slope);
        let c2 = b.conv(&format!("{name}.conv2"), &block.conv2, a1, 1)?;
        x = if i == 0 { c2 } else { b.tape.add(x, c2)? };
    }
    Ok(x)
}

/// Per-scale responses: resize the feature map by each level's scale, apply
/// that level's 5x5 filter, sharpen with the windowed softmax, and resize
/// back to the input resolution. Returns the stacked maps `[1, h, w, n]`.
pub fn scale_space_scores<T: Scalar>(
    b: &mut Binder<T>,
    features: TensorId,
    params: &DetectorParams<T>,
    arch: &ArchConfig,
) -> Result<(TensorId, Vec<f64>)> {
    let scales = level_scales(arch.scale_levels, arch.scale_range);
    let shape = b.tape.shape(features).to_vec();
    let (h, w) = (shape[1], shape[2]);
    let temp = T::of(arch.nms_temperature);
    let mut levels = Vec::with_capacity(scales.len());
    for (n, &s) in scales.iter().enumerate() {
        let resized = if (s - 1.0).abs() < 1e-12 {
            features
        } else {
            b.tape.bilinear_resize_by(features, s)?
        };
        let raw = b.conv(
            &format!("detector.score{n}"),
            &params.score_filters[n],
            resized,
            1,
        )?;
        let sharpened = b.tape.softmax_window(raw, arch.nms_window, temp)?;
        let back = if b.tape.shape(sharpened)[1] == h && b.tape.shape(sharpened)[2] == w {
            sharpened
        } else {
            b.tape.bilinear_resize(sharpened, h, w)?
        };
        levels.push(back);
    }
    let stack = b.tape.stack_channels(&levels)?;
    Ok((stack, scales))
}

/// Merge the per-scale stack into the final score map: responses weighted by
/// their own per-pixel softmax across the scale axis.
pub fn merge_scale_space<T: Scalar>(
    tape: &mut Tape<T>,
    stack: TensorId,
    arch: &ArchConfig,
) -> Result<TensorId> {
    tape.scale_merge(stack, T::of(arch.softargmax_temperature))
}

/// Dense orientation: one 5x5 convolution producing sine and cosine
/// channels, combined with atan2.
pub fn orientation_map<T: Scalar>(
    b: &mut Binder<T>,
    features: TensorId,
    params: &DetectorParams<T>,
) -> Result<TensorId> {
    let raw = b.conv("detector.orientation", &params.orientation, features, 1)?;
    let sin = b.tape.slice_channel(raw, 0)?;
    let cos = b.tape.slice_channel(raw, 1)?;
    b.tape.atan2(sin, cos)
}

/// Full dense forward pass on one image.
pub fn detector_forward<T: Scalar>(
    b: &mut Binder<T>,
    image: TensorId,
    params: &DetectorParams<T>,
    arch: &ArchConfig,
) -> Result<DetectorOutputs> {
    let features = feature_map(b, image, params, arch)?;
    let (score_stack, level_scales) = scale_space_scores(b, features, params, arch)?;
    let score_map = merge_scale_space(&mut b.tape, score_stack, arch)?;
    let theta_map = orientation_map(b, features, params)?;
    Ok(DetectorOutputs {
        feature_map: features,
        score_stack,
        score_map,
        theta_map,
        level_scales,
    })
}

/// Differentiable handles for the selected keypoints, plus their detached
/// integer anchors and scores.
pub struct SelectedKeypoints {
    /// `[k]` sub-pixel x coordinates.
    pub xs: TensorId,
    /// `[k]` sub-pixel y coordinates.
    pub ys: TensorId,
    /// `[k]` log of the keypoint scale.
    pub log_scales: TensorId,
    /// `[k]` orientations in radians.
    pub thetas: TensorId,
    /// Integer pixel each keypoint was selected at.
    pub anchors: Vec<(usize, usize)>,
    /// Score map value at the anchor.
    pub scores: Vec<f64>,
}

impl SelectedKeypoints {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Detached snapshot of the current values.
    pub fn to_keypoints<T: Scalar>(&self, tape: &Tape<T>) -> Vec<Keypoint> {
        let xs = tape.value(self.xs);
        let ys = tape.value(self.ys);
        let ls = tape.value(self.log_scales);
        let th = tape.value(self.thetas);
        (0..self.len())
            .map(|i| Keypoint {
                x: xs[i].to64() as f32,
                y: ys[i].to64() as f32,
                scale: ls[i].to64().exp() as f32,
                orientation: th[i].to64() as f32,
                score: self.scores[i] as f32,
            })
            .collect()
    }
}

/// Pick the top-K score-map pixels (outside `margin`), refine each to
/// sub-pixel accuracy with a local softargmax, read per-keypoint scale from
/// the stack via a softargmax over log-scales, and orientation from the
/// dense map. Ties break in row-major order. Gradients flow through the
/// refined coordinates, scales, and orientations; the discrete top-K choice
/// itself is fixed.
pub fn select_keypoints<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &DetectorOutputs,
    k: usize,
    margin: usize,
    arch: &ArchConfig,
) -> Result<SelectedKeypoints> {
    if k == 0 {
        return Err(Error::invalid("select_keypoints", "k must be >= 1"));
    }
    let shape = tape.shape(outputs.score_map).to_vec();
    let (h, w) = (shape[1], shape[2]);
    let radius = arch.subpixel_window / 2;
    let margin = margin.max(radius);
    if h <= 2 * margin || w <= 2 * margin {
        return Err(Error::invalid(
            "select_keypoints",
            format!("margin {margin} leaves no interior in {w}x{h}"),
        ));
    }

    // Detached top-K scan over the interior.
    let values = tape.value(outputs.score_map);
    let mut order: Vec<(usize, usize, f64)> = Vec::with_capacity((h - 2 * margin) * (w - 2 * margin));
    for y in margin..h - margin {
        for x in margin..w - margin {
            order.push((x, y, values[y * w + x].to64()));
        }
    }
    if order.len() < k {
        return Err(Error::invalid(
            "select_keypoints",
            format!("requested {k} keypoints, only {} selectable pixels", order.len()),
        ));
    }
    order.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.1, a.0).cmp(&(b.1, b.0)))
    });
    order.truncate(k);
    let anchors: Vec<(usize, usize)> = order.iter().map(|&(x, y, _)| (x, y)).collect();
    let scores: Vec<f64> = order.iter().map(|&(_, _, s)| s).collect();
    let ax: Vec<usize> = anchors.iter().map(|&(x, _)| x).collect();
    let ay: Vec<usize> = anchors.iter().map(|&(_, y)| y).collect();

    // Sub-pixel refinement.
    let temp = T::of(arch.softargmax_temperature);
    let windows = tape.gather_windows(outputs.score_map, &ax, &ay, radius)?;
    let offsets = tape.softargmax_2d(windows, temp)?;
    let off4 = tape.reshape(offsets, &[1, 1, k, 2])?;
    let dx4 = tape.slice_channel(off4, 0)?;
    let dy4 = tape.slice_channel(off4, 1)?;
    let dx = tape.reshape(dx4, &[k])?;
    let dy = tape.reshape(dy4, &[k])?;
    let cx = tape.constant(ax.iter().map(|&v| T::of(v as f64)).collect(), &[k])?;
    let cy = tape.constant(ay.iter().map(|&v| T::of(v as f64)).collect(), &[k])?;
    let xs = tape.add(dx, cx)?;
    let ys = tape.add(dy, cy)?;

    // Scale from per-level responses at the anchor pixel.
    let log_coords: Vec<T> = outputs
        .level_scales
        .iter()
        .map(|&s| T::of(s.ln()))
        .collect();
    let level_rows = tape.gather_pixels(outputs.score_stack, &ax, &ay)?;
    let log_scales = tape.softargmax_axis(level_rows, &log_coords, temp)?;

    // Orientation read at the anchor pixel.
    let theta_rows = tape.gather_pixels(outputs.theta_map, &ax, &ay)?;
    let thetas = tape.reshape(theta_rows, &[k])?;

    Ok(SelectedKeypoints {
        xs,
        ys,
        log_scales,
        thetas,
        anchors,
        scores,
    })
}

#[cfg(test)]
mod tests;
