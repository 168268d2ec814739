//! Patch descriptor: crop oriented, scaled patches around keypoints and map
//! each to a unit-norm embedding.

use crate::config::ArchConfig;
use crate::diff::{Scalar, TensorId};
use crate::model::{Binder, DescriptorParams};
use crate::{Error, Result};

/// Crop one patch per keypoint from the normalized image. The physical side
/// is `base_support * scale`, rotated by the keypoint orientation, resampled
/// to `patch_size`^2. Gradients reach the keypoint coordinates, scale, and
/// orientation.
///
/// With `enforce_margin` set (training), a keypoint whose anchor violates
/// the margin is an error; without it (inference), out-of-bounds samples
/// simply read zero.
pub fn crop_patches<T: Scalar>(
    b: &mut Binder<T>,
    image: TensorId,
    xs: TensorId,
    ys: TensorId,
    log_scales: TensorId,
    thetas: TensorId,
    arch: &ArchConfig,
    enforce_margin: Option<usize>,
) -> Result<TensorId> {
    if let Some(margin) = enforce_margin {
        let shape = b.tape.shape(image).to_vec();
        let (h, w) = (shape[1] as f64, shape[2] as f64);
        let m = margin as f64;
        for (&x, &y) in b.tape.value(xs).iter().zip(b.tape.value(ys)) {
            let (x, y) = (x.to64(), y.to64());
            if x < m || y < m || x > w - 1.0 - m || y > h - 1.0 - m {
                return Err(Error::invalid(
                    "crop_patches",
                    format!("keypoint ({x:.1}, {y:.1}) violates margin {margin} in {w}x{h}"),
                ));
            }
        }
    }
    let scales = b.tape.exp(log_scales);
    let sides = b.tape.scale(scales, T::of(arch.base_support));
    b.tape
        .sample_patches(image, xs, ys, sides, thetas, arch.patch_size)
}

/// Descriptor network: three stride-2 3x3 convolutions with BN + ReLU, a
/// fully connected layer with BN + ReLU, a final projection, then l2
/// normalization. `patches` is `[k, p, p, 1]`; the result is `[k, m]`.
pub fn describe<T: Scalar>(
    b: &mut Binder<T>,
    patches: TensorId,
    params: &DescriptorParams<T>,
) -> Result<TensorId> {
    let shape = b.tape.shape(patches).to_vec();
    if shape.len() != 4 || shape[3] != 1 {
        return Err(Error::invalid(
            "describe",
            format!("patches must be [k, p, p, 1], got {shape:?}"),
        ));
    }
    let k = shape[0];
    let mut x = patches;
    for (i, (conv, bn)) in params.convs.iter().enumerate() {
        let c = b.conv(&format!("descriptor.conv{i}"), conv, x, 2)?;
        let n = b.bn(&format!("descriptor.conv{i}.bn"), bn, c)?;
        x = b.tape.relu(n);
    }
    let spatial = b.tape.shape(x)[1] * b.tape.shape(x)[2] * b.tape.shape(x)[3];
    let flat = b.tape.reshape(x, &[k, spatial])?;
    let w1 = b.param("descriptor.fc1.weight", &params.fc1)?;
    let b1 = b.param("descriptor.fc1.bias", &params.fc1_bias)?;
    let h1 = b.tape.matmul(flat, w1)?;
    let h1 = b.tape.add_bias(h1, b1)?;
    let h1 = b.bn("descriptor.fc1.bn", &params.fc1_bn, h1)?;
    let h1 = b.tape.relu(h1);
    let w2 = b.param("descriptor.fc2.weight", &params.fc2)?;
    let b2 = b.param("descriptor.fc2.bias", &params.fc2_bias)?;
    let h2 = b.tape.matmul(h1, w2)?;
    let h2 = b.tape.add_bias(h2, b2)?;
    b.tape.l2_normalize_rows(h2)
}

#[cfg(test)]
mod tests;
