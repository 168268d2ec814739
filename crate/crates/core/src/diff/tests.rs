use super::gradcheck::{check_gradients, standard_suite};
use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn randv(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Independent reference convolution: explicit nested loops over output,
/// kernel taps, and channels, with explicit zero padding.
#[allow(clippy::too_many_arguments)]
fn reference_conv(
    input: &[f64],
    (h, w, cin): (usize, usize, usize),
    kernel: &[f64],
    (kh, kw, cout): (usize, usize, usize),
    bias: &[f64],
) -> Vec<f64> {
    let pad_y = (kh - 1) / 2;
    let pad_x = (kw - 1) / 2;
    let mut out = vec![0.0; h * w * cout];
    for oy in 0..h {
        for ox in 0..w {
            for co in 0..cout {
                let mut acc = bias[co];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = oy as isize + ky as isize - pad_y as isize;
                        let ix = ox as isize + kx as isize - pad_x as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let iv = input[(iy as usize * w + ix as usize) * cin + ci];
                            let kv = kernel[((ky * kw + kx) * cin + ci) * cout + co];
                            acc += iv * kv;
                        }
                    }
                }
                out[(oy * w + ox) * cout + co] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_one_by_one_identity() {
    let mut tape = Tape::<f64>::new();
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let data = randv(&mut rng, 25);
    let x = tape.leaf(data.clone(), &[1, 5, 5, 1], false).unwrap();
    let k = tape.constant(vec![1.0], &[1, 1, 1, 1]).unwrap();
    let b = tape.constant(vec![0.0], &[1]).unwrap();
    let y = tape.conv2d(x, k, b, 1, true).unwrap();
    assert_eq!(tape.value(y), data.as_slice());
}

#[test]
fn conv2d_zero_input_yields_bias() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![0.0; 4 * 4 * 2], &[1, 4, 4, 2]).unwrap();
    let k = tape.constant(vec![0.3; 3 * 3 * 2 * 3], &[3, 3, 2, 3]).unwrap();
    let b = tape.constant(vec![0.5, -1.5, 2.0], &[3]).unwrap();
    let y = tape.conv2d(x, k, b, 1, true).unwrap();
    for row in tape.value(y).chunks(3) {
        assert_eq!(row, [0.5, -1.5, 2.0]);
    }
}

#[test]
fn conv2d_matches_nested_loop_reference() {
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let input = randv(&mut rng, 8 * 8 * 2);
    let kernel = randv(&mut rng, 5 * 5 * 2 * 3);
    let bias = randv(&mut rng, 3);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(input.clone(), &[1, 8, 8, 2], false).unwrap();
    let k = tape.leaf(kernel.clone(), &[5, 5, 2, 3], false).unwrap();
    let b = tape.leaf(bias.clone(), &[3], false).unwrap();
    let y = tape.conv2d(x, k, b, 1, true).unwrap();
    let expect = reference_conv(&input, (8, 8, 2), &kernel, (5, 5, 3), &bias);
    for (got, want) in tape.value(y).iter().zip(&expect) {
        let rel = (got - want).abs() / want.abs().max(1.0);
        assert!(rel < 1e-10, "got {got}, want {want}");
    }
}

#[test]
fn conv2d_stride2_halves_dims_ceil() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(vec![1.0; 7 * 5], &[1, 7, 5, 1]).unwrap();
    let k = tape.constant(vec![1.0; 9], &[3, 3, 1, 1]).unwrap();
    let b = tape.constant(vec![0.0], &[1]).unwrap();
    let y = tape.conv2d(x, k, b, 2, true).unwrap();
    assert_eq!(tape.shape(y), &[1, 4, 3, 1]);
}

#[test]
fn conv2d_channel_mismatch_names_dimension() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(vec![0.0; 16], &[1, 4, 4, 1]).unwrap();
    let k = tape.constant(vec![0.0; 9 * 2], &[3, 3, 2, 1]).unwrap();
    let b = tape.constant(vec![0.0], &[1]).unwrap();
    let err = tape.conv2d(x, k, b, 1, true).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("input channels"), "unexpected message: {msg}");
}

#[test]
fn softmax_window_uniform_map_interior() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![0.7; 9 * 9], &[1, 9, 9, 1]).unwrap();
    let y = tape.softmax_window(x, 5, 1.0).unwrap();
    let v = tape.value(y);
    for yy in 2..7 {
        for xx in 2..7 {
            assert!((v[yy * 9 + xx] - 1.0 / 25.0).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_window_saturates_at_peak() {
    let mut data = vec![0.0; 9 * 9];
    data[4 * 9 + 4] = 30.0;
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(data, &[1, 9, 9, 1]).unwrap();
    let y = tape.softmax_window(x, 5, 1.0).unwrap();
    let v = tape.value(y);
    assert!((v[4 * 9 + 4] - 1.0).abs() < 1e-3);
    assert!(v[4 * 9 + 5] < 1e-3);
}

#[test]
fn softmax_window_matches_explicit_normalization() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let data = randv(&mut rng, 81);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(data.clone(), &[1, 9, 9, 1], false).unwrap();
    let y = tape.softmax_window(x, 3, 1.0).unwrap();
    let v = tape.value(y);
    for yy in 0..9_usize {
        for xx in 0..9_usize {
            let mut denom = 0.0;
            for dy in -1..=1_isize {
                for dx in -1..=1_isize {
                    let (ny, nx) = (yy as isize + dy, xx as isize + dx);
                    if ny >= 0 && nx >= 0 && ny < 9 && nx < 9 {
                        denom += data[ny as usize * 9 + nx as usize].exp();
                    }
                }
            }
            let want = data[yy * 9 + xx].exp() / denom;
            assert!((v[yy * 9 + xx] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_window_rejects_oversized_window() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(vec![0.0; 25], &[1, 5, 5, 1]).unwrap();
    assert!(tape.softmax_window(x, 7, 1.0).is_err());
}

#[test]
fn softargmax_2d_symmetric_window_is_centered() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![0.3; 25], &[1, 5, 5]).unwrap();
    let y = tape.softargmax_2d(x, 1.0).unwrap();
    assert!(tape.value(y)[0].abs() < 1e-12);
    assert!(tape.value(y)[1].abs() < 1e-12);
}

#[test]
fn softargmax_2d_delta_limit() {
    // Peak at offset (+1, -2) from the center of a 5x5 window.
    let mut data = vec![0.0; 25];
    data[0 * 5 + 3] = 1.0;
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(data, &[1, 5, 5]).unwrap();
    let y = tape.softargmax_2d(x, 0.01).unwrap();
    assert!((tape.value(y)[0] - 1.0).abs() < 1e-3);
    assert!((tape.value(y)[1] + 2.0).abs() < 1e-3);
}

#[test]
fn softargmax_2d_matches_weighted_sum_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let data = randv(&mut rng, 25);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(data.clone(), &[1, 5, 5], false).unwrap();
    let y = tape.softargmax_2d(x, 1.0).unwrap();
    let z: f64 = data.iter().map(|v| v.exp()).sum();
    let mut dx = 0.0;
    let mut dy = 0.0;
    for row in 0..5 {
        for col in 0..5 {
            let w = data[row * 5 + col].exp() / z;
            dx += w * (col as f64 - 2.0);
            dy += w * (row as f64 - 2.0);
        }
    }
    assert!((tape.value(y)[0] - dx).abs() < 1e-12);
    assert!((tape.value(y)[1] - dy).abs() < 1e-12);
}

#[test]
fn softargmax_axis_single_element() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![0.42], &[1, 1]).unwrap();
    let y = tape.softargmax_axis(x, &[1.7], 1.0).unwrap();
    assert_eq!(tape.value(y), &[1.7]);
}

#[test]
fn softargmax_axis_uniform_weights_give_mean_log_coord() {
    // Log-spaced scales in [1/sqrt(2), sqrt(2)]; softargmax over log-coords
    // of equal responses lands on the geometric mean (log 1 = 0).
    let logs: Vec<f64> = (0..5)
        .map(|i| (i as f64 / 4.0 - 0.5) * std::f64::consts::LN_2)
        .collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![0.3; 5], &[1, 5]).unwrap();
    let y = tape.softargmax_axis(x, &logs, 1.0).unwrap();
    assert!(tape.value(y)[0].abs() < 1e-12);
}

#[test]
fn softargmax_axis_matches_weighted_sum_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let data = randv(&mut rng, 5);
    let coords = [0.1, 0.3, 0.5, 0.9, 1.4];
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(data.clone(), &[1, 5], false).unwrap();
    let y = tape.softargmax_axis(x, &coords, 1.0).unwrap();
    let z: f64 = data.iter().map(|v| v.exp()).sum();
    let want: f64 = data
        .iter()
        .zip(&coords)
        .map(|(v, c)| v.exp() / z * c)
        .sum();
    assert!((tape.value(y)[0] - want).abs() < 1e-12);
}

#[test]
fn softargmax_axis_rejects_empty() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![], &[1, 0]).unwrap();
    assert!(tape.softargmax_axis(x, &[], 1.0).is_err());
}

#[test]
fn bilinear_resize_identity_at_factor_one() {
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let data = randv(&mut rng, 5 * 7);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(data.clone(), &[1, 5, 7, 1], false).unwrap();
    let y = tape.bilinear_resize_by(x, 1.0).unwrap();
    assert_eq!(tape.value(y), data.as_slice());
}

#[test]
fn bilinear_resize_keeps_constants() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![0.37; 6 * 6], &[1, 6, 6, 1]).unwrap();
    for factor in [0.5, 0.71, 1.4, 2.0] {
        let y = tape.bilinear_resize_by(x, factor).unwrap();
        for &v in tape.value(y) {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }
}

#[test]
fn bilinear_resize_matches_explicit_oracle() {
    // 4x4 ramp upsampled by 2: check every output against the align-corners-
    // false formula evaluated directly.
    let data: Vec<f64> = (0..16).map(|i| (i % 4 + i / 4) as f64).collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(data.clone(), &[1, 4, 4, 1], false).unwrap();
    let y = tape.bilinear_resize_by(x, 2.0).unwrap();
    let v = tape.value(y);
    for oy in 0..8_usize {
        for ox in 0..8_usize {
            let sx = ((ox as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 3.0);
            let sy = ((oy as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 3.0);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let at = |xx: f64, yy: f64| data[(yy.min(3.0) as usize) * 4 + xx.min(3.0) as usize];
            let want = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + at(x0 + 1.0, y0) * fx * (1.0 - fy)
                + at(x0, y0 + 1.0) * (1.0 - fx) * fy
                + at(x0 + 1.0, y0 + 1.0) * fx * fy;
            assert!((v[oy * 8 + ox] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn bilinear_resize_rejects_empty_output() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(vec![0.0; 16], &[1, 4, 4, 1]).unwrap();
    assert!(tape.bilinear_resize_by(x, 0.05).is_err());
}

fn patch_of(
    image: &[f64],
    (h, w): (usize, usize),
    center: (f64, f64),
    side: f64,
    theta: f64,
    out: usize,
) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let img = tape.leaf(image.to_vec(), &[1, h, w, 1], false).unwrap();
    let xs = tape.constant(vec![center.0], &[1]).unwrap();
    let ys = tape.constant(vec![center.1], &[1]).unwrap();
    let sides = tape.constant(vec![side], &[1]).unwrap();
    let thetas = tape.constant(vec![theta], &[1]).unwrap();
    let p = tape.sample_patches(img, xs, ys, sides, thetas, out).unwrap();
    tape.value(p).to_vec()
}

#[test]
fn sample_patch_exact_crop() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let image = randv(&mut rng, 8 * 8);
    // side == out_size and center on the half-integer grid puts every sample
    // on an exact pixel: a plain 4x4 crop starting at (2, 1).
    let patch = patch_of(&image, (8, 8), (3.5, 2.5), 4.0, 0.0, 4);
    for v in 0..4 {
        for u in 0..4 {
            assert!((patch[v * 4 + u] - image[(v + 1) * 8 + u + 2]).abs() < 1e-12);
        }
    }
}

#[test]
fn sample_patch_rotation_by_pi_flips() {
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let image = randv(&mut rng, 12 * 12);
    let a = patch_of(&image, (12, 12), (5.7, 6.2), 5.0, 0.0, 5);
    let b = patch_of(&image, (12, 12), (5.7, 6.2), 5.0, std::f64::consts::PI, 5);
    for v in 0..5 {
        for u in 0..5 {
            let flipped = a[(4 - v) * 5 + (4 - u)];
            assert!((b[v * 5 + u] - flipped).abs() < 1e-9);
        }
    }
}

#[test]
fn sample_patch_matches_inverse_map_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let image = randv(&mut rng, 16 * 16);
    let (cx, cy, side, theta) = (7.3, 5.8, 8.0, 0.4);
    let out = 6_usize;
    let patch = patch_of(&image, (16, 16), (cx, cy), side, theta, out);
    for v in 0..out {
        for u in 0..out {
            let au = (u as f64 - (out as f64 - 1.0) / 2.0) / out as f64;
            let av = (v as f64 - (out as f64 - 1.0) / 2.0) / out as f64;
            let px = cx + side * (theta.cos() * au - theta.sin() * av);
            let py = cy + side * (theta.sin() * au + theta.cos() * av);
            let (x0, y0) = (px.floor(), py.floor());
            let (fx, fy) = (px - x0, py - y0);
            let at = |xx: f64, yy: f64| -> f64 {
                if xx < 0.0 || yy < 0.0 || xx > 15.0 || yy > 15.0 {
                    0.0
                } else {
                    image[yy as usize * 16 + xx as usize]
                }
            };
            let want = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + at(x0 + 1.0, y0) * fx * (1.0 - fy)
                + at(x0, y0 + 1.0) * (1.0 - fx) * fy
                + at(x0 + 1.0, y0 + 1.0) * fx * fy;
            assert!((patch[v * out + u] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn sample_patch_rejects_non_finite_center() {
    let mut tape = Tape::<f64>::new();
    let img = tape.constant(vec![0.0; 64], &[1, 8, 8, 1]).unwrap();
    let xs = tape.constant(vec![f64::NAN], &[1]).unwrap();
    let ys = tape.constant(vec![1.0], &[1]).unwrap();
    let s = tape.constant(vec![2.0], &[1]).unwrap();
    let t = tape.constant(vec![0.0], &[1]).unwrap();
    assert!(tape.sample_patches(img, xs, ys, s, t, 4).is_err());
}

#[test]
fn backward_is_deterministic() {
    let run = || -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(randv(&mut rng, 36), &[1, 6, 6, 1], true).unwrap();
        let k = tape.leaf(randv(&mut rng, 9), &[3, 3, 1, 1], true).unwrap();
        let b = tape.leaf(randv(&mut rng, 1), &[1], true).unwrap();
        let c = tape.conv2d(x, k, b, 1, true).unwrap();
        let s = tape.softmax_window(c, 3, 1.0).unwrap();
        let loss = tape.mean_all(s);
        let grads = tape.backward(loss).unwrap();
        let mut out = grads.get(x).unwrap().to_vec();
        out.extend_from_slice(grads.get(k).unwrap());
        out
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "gradients must be bit-identical across runs");
}

#[test]
fn forward_stays_finite_on_extreme_inputs() {
    let mut tape = Tape::<f32>::new();
    let x = tape
        .constant(vec![80.0, -80.0, 0.0, 55.0, -3.0, 7.0, 1.0, 2.0, 3.0], &[1, 3, 3, 1])
        .unwrap();
    let y = tape.softmax_window(x, 3, 1.0).unwrap();
    assert!(tape.value(y).iter().all(|v| v.is_finite()));
    let m = tape.scale_merge(x, 1.0).unwrap();
    assert!(tape.value(m).iter().all(|v| v.is_finite()));
}

#[test]
fn gradient_suite_passes_default_tolerances() {
    for outcome in standard_suite(false).unwrap() {
        assert!(
            outcome.passed(),
            "{} failed: max rel err {:.3e} (tol {:.0e}, {} elements)",
            outcome.name,
            outcome.max_rel_err,
            outcome.tolerance,
            outcome.elements
        );
    }
}

#[test]
fn gradcheck_flags_corrupted_gradients() {
    // Fault injection: forward computes 3x but a third of it flows through a
    // detached constant, so the analytic gradient is 2 while finite
    // differences see 3. The check must fail and carry the op name.
    let outcome = check_gradients(
        "corrupted_affine",
        &[(vec![0.4, -0.7, 1.1], vec![3])],
        1e-5,
        1e-5,
        |t, ids| {
            let doubled = t.affine(ids[0], 2.0, 0.0);
            let detached = t.constant(t.value(ids[0]).to_vec(), &[3])?;
            t.add(doubled, detached)
        },
    )
    .unwrap();
    assert!(!outcome.passed());
    assert_eq!(outcome.name, "corrupted_affine");
}

proptest! {
    #[test]
    fn softargmax_offsets_bounded_by_half_width(values in proptest::collection::vec(-10.0f64..10.0, 25)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(values, &[1, 5, 5], false).unwrap();
        let y = tape.softargmax_2d(x, 1.0).unwrap();
        prop_assert!(tape.value(y)[0].abs() <= 2.0 + 1e-12);
        prop_assert!(tape.value(y)[1].abs() <= 2.0 + 1e-12);
    }

    #[test]
    fn softargmax_axis_stays_in_coord_hull(values in proptest::collection::vec(-5.0f64..5.0, 4)) {
        let coords = [-0.9, -0.3, 0.4, 1.2];
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(values, &[1, 4], false).unwrap();
        let y = tape.softargmax_axis(x, &coords, 1.0).unwrap();
        prop_assert!(tape.value(y)[0] >= -0.9 - 1e-12);
        prop_assert!(tape.value(y)[0] <= 1.2 + 1e-12);
    }
}
