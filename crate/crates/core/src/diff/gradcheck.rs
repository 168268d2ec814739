//! Finite-difference verification of every op's backward rule.
//!
//! Checks run in double precision: the analytic gradient of a scalar
//! projection of the op output is compared against central finite
//! differences on every input element (random subsample above 10^4
//! elements). The relative error uses a scale guard so that elements whose
//! gradient is orders of magnitude below the tensor's largest gradient do
//! not dominate the report.

use super::{Scalar, Tape, TensorId};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Result of checking one op.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub elements: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

type Builder = fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>;

const FD_SUBSAMPLE_LIMIT: usize = 10_000;

fn projection_weights(len: usize) -> Vec<f64> {
    (0..len).map(|i| (0.31 + 0.77 * i as f64).sin()).collect()
}

fn eval_loss(build: Builder, inputs: &[(Vec<f64>, Vec<usize>)]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(data, shape)| tape.leaf(data.clone(), shape, false))
        .collect::<Result<_>>()?;
    let out = build(&mut tape, &ids)?;
    let w = projection_weights(tape.value(out).len());
    let wc = tape.constant(w, &tape.shape(out).to_vec())?;
    let prod = tape.mul(out, wc)?;
    let loss = tape.sum_all(prod);
    Ok(tape.scalar_value(loss))
}

/// Compare analytic gradients against central finite differences.
///
/// `eps` is the finite-difference step; it must lie in `[1e-7, 1e-3]`.
pub fn check_gradients(
    name: &str,
    inputs: &[(Vec<f64>, Vec<usize>)],
    eps: f64,
    tolerance: f64,
    build: Builder,
) -> Result<CheckOutcome> {
    assert!(
        (1e-7..=1e-3).contains(&eps),
        "finite-difference step outside supported range"
    );
    // Analytic gradients.
    let mut tape = Tape::<f64>::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(data, shape)| tape.leaf(data.clone(), shape, true))
        .collect::<Result<_>>()?;
    let out = build(&mut tape, &ids)?;
    let w = projection_weights(tape.value(out).len());
    let wc = tape.constant(w, &tape.shape(out).to_vec())?;
    let prod = tape.mul(out, wc)?;
    let loss = tape.sum_all(prod);
    let grads = tape.backward(loss)?;

    let total: usize = inputs.iter().map(|(d, _)| d.len()).sum();
    let mut rng = ChaCha12Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let keep_prob = (FD_SUBSAMPLE_LIMIT as f64 / total as f64).min(1.0);

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for (ti, (data, _)) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[ti])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; data.len()]);
        for ei in 0..data.len() {
            if keep_prob < 1.0 && rng.random::<f64>() > keep_prob {
                continue;
            }
            let mut perturbed: Vec<(Vec<f64>, Vec<usize>)> = inputs.to_vec();
            perturbed[ti].0[ei] = data[ei] + eps;
            let plus = eval_loss(build, &perturbed)?;
            perturbed[ti].0[ei] = data[ei] - eps;
            let minus = eval_loss(build, &perturbed)?;
            pairs.push((analytic[ei], (plus - minus) / (2.0 * eps)));
        }
    }

    let gmax = pairs
        .iter()
        .map(|&(a, f)| a.abs().max(f.abs()))
        .fold(0.0_f64, f64::max);
    let floor = 1e-2 * gmax + 1e-12;
    let max_rel_err = pairs
        .iter()
        .map(|&(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .fold(0.0_f64, f64::max);
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_err,
        tolerance,
        elements: pairs.len(),
    })
}

fn fill<T: Scalar>(rng: &mut ChaCha12Rng, n: usize, lo: f64, hi: f64) -> Vec<T> {
    (0..n).map(|_| T::of(rng.random_range(lo..hi))).collect()
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn fill_away_from_zero(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.random_range(0.2..1.0);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

struct Case {
    name: &'static str,
    inputs: Vec<(Vec<f64>, Vec<usize>)>,
    interpolating: bool,
    build: Builder,
}

fn suite_cases() -> Vec<Case> {
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    let r = &mut rng;
    let mut cases = Vec::new();

    cases.push(Case {
        name: "add",
        inputs: vec![(fill(r, 12, -1.0, 1.0), vec![3, 4]), (fill(r, 12, -1.0, 1.0), vec![3, 4])],
        interpolating: false,
        build: |t, ids| t.add(ids[0], ids[1]),
    });
    cases.push(Case {
        name: "sub",
        inputs: vec![(fill(r, 12, -1.0, 1.0), vec![3, 4]), (fill(r, 12, -1.0, 1.0), vec![3, 4])],
        interpolating: false,
        build: |t, ids| t.sub(ids[0], ids[1]),
    });
    cases.push(Case {
        name: "mul",
        inputs: vec![(fill(r, 12, -1.0, 1.0), vec![3, 4]), (fill(r, 12, -1.0, 1.0), vec![3, 4])],
        interpolating: false,
        build: |t, ids| t.mul(ids[0], ids[1]),
    });
    cases.push(Case {
        name: "affine",
        inputs: vec![(fill(r, 10, -1.0, 1.0), vec![10])],
        interpolating: false,
        build: |t, ids| Ok(t.affine(ids[0], 1.7, -0.3)),
    });
    cases.push(Case {
        name: "exp",
        inputs: vec![(fill(r, 10, -1.0, 1.0), vec![10])],
        interpolating: false,
        build: |t, ids| Ok(t.exp(ids[0])),
    });
    cases.push(Case {
        name: "relu",
        inputs: vec![(fill_away_from_zero(r, 16), vec![16])],
        interpolating: false,
        build: |t, ids| Ok(t.relu(ids[0])),
    });
    cases.push(Case {
        name: "leaky_relu",
        inputs: vec![(fill_away_from_zero(r, 16), vec![16])],
        interpolating: false,
        build: |t, ids| Ok(t.leaky_relu(ids[0], 0.2)),
    });
    cases.push(Case {
        name: "wrap_angle",
        inputs: vec![(fill(r, 8, -2.0, 2.0), vec![8])],
        interpolating: false,
        build: |t, ids| Ok(t.wrap_angle(ids[0])),
    });
    cases.push(Case {
        name: "atan2",
        inputs: vec![
            (fill_away_from_zero(r, 9), vec![9]),
            (fill_away_from_zero(r, 9), vec![9]),
        ],
        interpolating: false,
        build: |t, ids| t.atan2(ids[0], ids[1]),
    });
    cases.push(Case {
        name: "mean_all",
        inputs: vec![(fill(r, 20, -1.0, 1.0), vec![4, 5])],
        interpolating: false,
        build: |t, ids| Ok(t.mean_all(ids[0])),
    });
    cases.push(Case {
        name: "sum_rows",
        inputs: vec![(fill(r, 20, -1.0, 1.0), vec![4, 5])],
        interpolating: false,
        build: |t, ids| t.sum_rows(ids[0]),
    });
    cases.push(Case {
        name: "reshape",
        inputs: vec![(fill(r, 24, -1.0, 1.0), vec![2, 3, 4])],
        interpolating: false,
        build: |t, ids| t.reshape(ids[0], &[6, 4]),
    });
    cases.push(Case {
        name: "stack_slice",
        inputs: vec![
            (fill(r, 12, -1.0, 1.0), vec![1, 3, 4, 1]),
            (fill(r, 12, -1.0, 1.0), vec![1, 3, 4, 1]),
        ],
        interpolating: false,
        build: |t, ids| {
            let s = t.stack_channels(ids)?;
            t.slice_channel(s, 1)
        },
    });
    cases.push(Case {
        name: "matmul",
        inputs: vec![(fill(r, 12, -1.0, 1.0), vec![3, 4]), (fill(r, 20, -1.0, 1.0), vec![4, 5])],
        interpolating: false,
        build: |t, ids| t.matmul(ids[0], ids[1]),
    });
    cases.push(Case {
        name: "add_bias",
        inputs: vec![(fill(r, 15, -1.0, 1.0), vec![3, 5]), (fill(r, 5, -1.0, 1.0), vec![5])],
        interpolating: false,
        build: |t, ids| t.add_bias(ids[0], ids[1]),
    });
    cases.push(Case {
        name: "conv2d_same",
        inputs: vec![
            (fill(r, 6 * 6 * 2, -1.0, 1.0), vec![1, 6, 6, 2]),
            (fill(r, 5 * 5 * 2 * 3, -0.5, 0.5), vec![5, 5, 2, 3]),
            (fill(r, 3, -0.5, 0.5), vec![3]),
        ],
        interpolating: false,
        build: |t, ids| t.conv2d(ids[0], ids[1], ids[2], 1, true),
    });
    cases.push(Case {
        name: "conv2d_stride2",
        inputs: vec![
            (fill(r, 7 * 7, -1.0, 1.0), vec![1, 7, 7, 1]),
            (fill(r, 9 * 2, -0.5, 0.5), vec![3, 3, 1, 2]),
            (fill(r, 2, -0.5, 0.5), vec![2]),
        ],
        interpolating: false,
        build: |t, ids| t.conv2d(ids[0], ids[1], ids[2], 2, true),
    });
    cases.push(Case {
        name: "conv2d_valid",
        inputs: vec![
            (fill(r, 6 * 6, -1.0, 1.0), vec![1, 6, 6, 1]),
            (fill(r, 9, -0.5, 0.5), vec![3, 3, 1, 1]),
            (fill(r, 1, -0.5, 0.5), vec![1]),
        ],
        interpolating: false,
        build: |t, ids| t.conv2d(ids[0], ids[1], ids[2], 1, false),
    });
    cases.push(Case {
        name: "batch_norm_batch",
        inputs: vec![
            (fill(r, 4 * 3 * 3 * 2, -1.0, 1.0), vec![4, 3, 3, 2]),
            (fill(r, 2, 0.5, 1.5), vec![2]),
            (fill(r, 2, -0.5, 0.5), vec![2]),
        ],
        interpolating: false,
        build: |t, ids| {
            let (y, _) = t.batch_norm(ids[0], ids[1], ids[2], super::BnUse::Batch, 1e-5)?;
            Ok(y)
        },
    });
    cases.push(Case {
        name: "batch_norm_running",
        inputs: vec![
            (fill(r, 4 * 2, -1.0, 1.0), vec![4, 2]),
            (fill(r, 2, 0.5, 1.5), vec![2]),
            (fill(r, 2, -0.5, 0.5), vec![2]),
        ],
        interpolating: false,
        build: |t, ids| {
            let mean = [0.1, -0.2];
            let var = [1.3, 0.8];
            let (y, _) = t.batch_norm(
                ids[0],
                ids[1],
                ids[2],
                super::BnUse::Running {
                    mean: &mean,
                    var: &var,
                },
                1e-5,
            )?;
            Ok(y)
        },
    });
    cases.push(Case {
        name: "softmax_window",
        inputs: vec![(fill(r, 81, -2.0, 2.0), vec![1, 9, 9, 1])],
        interpolating: false,
        build: |t, ids| t.softmax_window(ids[0], 3, 1.0),
    });
    cases.push(Case {
        name: "scale_merge",
        inputs: vec![(fill(r, 5 * 5 * 3, -1.5, 1.5), vec![1, 5, 5, 3])],
        interpolating: false,
        build: |t, ids| t.scale_merge(ids[0], 1.0),
    });
    cases.push(Case {
        name: "gather_pixels",
        inputs: vec![(fill(r, 6 * 6 * 2, -1.0, 1.0), vec![1, 6, 6, 2])],
        interpolating: false,
        build: |t, ids| t.gather_pixels(ids[0], &[1, 4, 2], &[2, 3, 2]),
    });
    cases.push(Case {
        name: "gather_windows_softargmax_2d",
        inputs: vec![(fill(r, 9 * 9, -1.5, 1.5), vec![1, 9, 9, 1])],
        interpolating: false,
        build: |t, ids| {
            let w = t.gather_windows(ids[0], &[3, 5], &[4, 3], 2)?;
            t.softargmax_2d(w, 1.0)
        },
    });
    cases.push(Case {
        name: "softargmax_axis",
        inputs: vec![(fill(r, 3 * 5, -1.0, 1.0), vec![3, 5])],
        interpolating: false,
        build: |t, ids| {
            let coords = [-0.35, -0.17, 0.0, 0.17, 0.35];
            t.softargmax_axis(ids[0], &coords, 1.0)
        },
    });
    cases.push(Case {
        name: "l2_normalize_rows",
        inputs: vec![(fill(r, 3 * 6, -1.0, 1.0), vec![3, 6])],
        interpolating: false,
        build: |t, ids| t.l2_normalize_rows(ids[0]),
    });
    cases.push(Case {
        name: "bilinear_resize_up",
        inputs: vec![(fill(r, 5 * 5, -1.0, 1.0), vec![1, 5, 5, 1])],
        interpolating: true,
        build: |t, ids| t.bilinear_resize(ids[0], 7, 7),
    });
    cases.push(Case {
        name: "bilinear_resize_down",
        inputs: vec![(fill(r, 8 * 8 * 2, -1.0, 1.0), vec![1, 8, 8, 2])],
        interpolating: true,
        build: |t, ids| t.bilinear_resize(ids[0], 5, 5),
    });
    cases.push(Case {
        name: "sample_patches",
        inputs: vec![
            (fill(r, 16 * 16, -1.0, 1.0), vec![1, 16, 16, 1]),
            (vec![7.3, 6.6], vec![2]),
            (vec![5.8, 8.2], vec![2]),
            (vec![6.0, 4.3], vec![2]),
            (vec![0.4, -1.1], vec![2]),
        ],
        interpolating: true,
        build: |t, ids| t.sample_patches(ids[0], ids[1], ids[2], ids[3], ids[4], 6),
    });
    cases
}

/// Run the finite-difference check over every op. `strict` tightens the
/// tolerance for non-interpolating ops from 1e-5 to 1e-6.
pub fn standard_suite(strict: bool) -> Result<Vec<CheckOutcome>> {
    let noninterp_tol = if strict { 1e-6 } else { 1e-5 };
    suite_cases()
        .into_iter()
        .map(|case| {
            let tol = if case.interpolating { 1e-4 } else { noninterp_tol };
            check_gradients(case.name, &case.inputs, 1e-5, tol, case.build)
        })
        .collect()
}
