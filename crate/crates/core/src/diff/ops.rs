//! Op records plus the eager-forward recording API on [`Tape`].

use super::kernels;
use super::{Scalar, Tape, TensorId};
use crate::{Error, Result};

/// Per-channel statistics observed by a batch-mode normalization.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Which statistics a batch-normalization should use.
pub enum BnUse<'a, T> {
    /// Normalize with statistics of the current batch (training).
    Batch,
    /// Normalize with externally tracked running statistics (inference).
    Running { mean: &'a [T], var: &'a [T] },
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Affine {
        x: TensorId,
        mul: T,
    },
    Exp {
        x: TensorId,
    },
    Relu {
        x: TensorId,
    },
    LeakyRelu {
        x: TensorId,
        slope: T,
    },
    WrapAngle {
        x: TensorId,
    },
    Atan2 {
        y: TensorId,
        x: TensorId,
    },
    SumAll {
        x: TensorId,
    },
    MeanAll {
        x: TensorId,
    },
    SumRows {
        x: TensorId,
    },
    Reshape {
        x: TensorId,
    },
    StackChannels {
        inputs: Vec<TensorId>,
    },
    SliceChannel {
        x: TensorId,
        channel: usize,
    },
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    AddBias {
        x: TensorId,
        bias: TensorId,
    },
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        same: bool,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    SoftmaxWindow {
        x: TensorId,
        radius: usize,
        temp: T,
        exps: Vec<T>,
        sums: Vec<T>,
    },
    BilinearResize {
        x: TensorId,
    },
    ScaleMerge {
        stack: TensorId,
        temp: T,
        weights: Vec<T>,
    },
    GatherPixels {
        map: TensorId,
        xs: Vec<usize>,
        ys: Vec<usize>,
    },
    GatherWindows {
        map: TensorId,
        xs: Vec<usize>,
        ys: Vec<usize>,
        radius: usize,
    },
    SoftArgmax2d {
        windows: TensorId,
        temp: T,
        weights: Vec<T>,
    },
    SoftArgmaxAxis {
        x: TensorId,
        coords: Vec<T>,
        temp: T,
        weights: Vec<T>,
    },
    SamplePatches {
        image: TensorId,
        xs: TensorId,
        ys: TensorId,
        sides: TensorId,
        thetas: TensorId,
        out_size: usize,
    },
    L2NormalizeRows {
        x: TensorId,
        inv_norms: Vec<T>,
    },
}

fn softmax_rows<T: Scalar>(values: &[T], cols: usize, temp: T) -> Vec<T> {
    let mut weights = vec![T::zero(); values.len()];
    for (row, wrow) in values.chunks(cols).zip(weights.chunks_mut(cols)) {
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (w, &v) in wrow.iter_mut().zip(row) {
            *w = ((v - m) / temp).exp();
            z = z + *w;
        }
        for w in wrow.iter_mut() {
            *w = *w / z;
        }
    }
    weights
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                dimension: "element count",
                actual: self.value(b).len(),
                expected: self.value(a).len(),
            });
        }
        Ok(())
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        rec: impl FnOnce(TensorId, TensorId) -> Op<T>,
    ) -> Result<TensorId> {
        self.same_shape(op, a, b)?;
        let value: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.input_requires_grad(&[a, b]);
        Ok(self.push(value, shape, rec(a, b), rg))
    }

    fn unary(
        &mut self,
        x: TensorId,
        f: impl Fn(T) -> T,
        rec: impl FnOnce(TensorId) -> Op<T>,
    ) -> TensorId {
        let value: Vec<T> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(value, shape, rec(x), rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn affine(&mut self, x: TensorId, mul: T, add: T) -> TensorId {
        self.unary(x, |v| mul * v + add, |x| Op::Affine { x, mul })
    }

    pub fn scale(&mut self, x: TensorId, mul: T) -> TensorId {
        self.affine(x, mul, T::zero())
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.exp(), |x| Op::Exp { x })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.max(T::zero()), |x| Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: T) -> TensorId {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { slope * v },
            |x| Op::LeakyRelu { x, slope },
        )
    }

    /// Wrap angles to `(-pi, pi]`. Identity gradient almost everywhere.
    pub fn wrap_angle(&mut self, x: TensorId) -> TensorId {
        let tau = T::of(std::f64::consts::TAU);
        let pi = T::of(std::f64::consts::PI);
        self.unary(
            x,
            |v| v - tau * ((v - pi) / tau).ceil(),
            |x| Op::WrapAngle { x },
        )
    }

    /// Elementwise `atan2(y, x)`, output in `(-pi, pi]`.
    pub fn atan2(&mut self, y: TensorId, x: TensorId) -> Result<TensorId> {
        self.elementwise("atan2", y, x, |a, b| a.atan2(b), |y, x| Op::Atan2 { y, x })
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: T = self.value(x).iter().cloned().sum();
        let rg = self.requires_grad(x);
        self.push(vec![s], vec![1], Op::SumAll { x }, rg)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).len();
        let s: T = self.value(x).iter().cloned().sum();
        let rg = self.requires_grad(x);
        self.push(
            vec![s / T::of(n as f64)],
            vec![1],
            Op::MeanAll { x },
            rg,
        )
    }

    /// `[k, d] -> [k]`, summing each row.
    pub fn sum_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "sum_rows",
                dimension: "rank",
                actual: shape.len(),
                expected: 2,
            });
        }
        let (k, d) = (shape[0], shape[1]);
        let value: Vec<T> = self
            .value(x)
            .chunks(d)
            .map(|row| row.iter().cloned().sum())
            .collect();
        let rg = self.requires_grad(x);
        Ok(self.push(value, vec![k], Op::SumRows { x }, rg))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let count: usize = shape.iter().product();
        if count != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                dimension: "element count",
                actual: count,
                expected: self.value(x).len(),
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(value, shape.to_vec(), Op::Reshape { x }, rg))
    }

    /// Stack single-channel maps `[1, h, w, 1]` into `[1, h, w, n]`.
    pub fn stack_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::invalid("stack_channels", "no inputs"));
        }
        let base = self.shape(inputs[0]).to_vec();
        for &id in inputs {
            self.same_shape("stack_channels", inputs[0], id)?;
        }
        let (h, w) = (base[1], base[2]);
        let n = inputs.len();
        let mut value = vec![T::zero(); h * w * n];
        for (i, &id) in inputs.iter().enumerate() {
            for (p, &v) in self.value(id).iter().enumerate() {
                value[p * n + i] = v;
            }
        }
        let rg = self.input_requires_grad(inputs);
        Ok(self.push(
            value,
            vec![1, h, w, n],
            Op::StackChannels {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Extract channel `c` of `[1, h, w, c]` as `[1, h, w, 1]`.
    pub fn slice_channel(&mut self, x: TensorId, channel: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || channel >= shape[3] {
            return Err(Error::Shape {
                op: "slice_channel",
                dimension: "channel",
                actual: channel,
                expected: shape.last().copied().unwrap_or(0),
            });
        }
        let c = shape[3];
        let value: Vec<T> = self.value(x).iter().skip(channel).step_by(c).cloned().collect();
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            vec![1, shape[1], shape[2], 1],
            Op::SliceChannel { x, channel },
            rg,
        ))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                dimension: "inner",
                actual: sb.first().copied().unwrap_or(0),
                expected: sa.last().copied().unwrap_or(0),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a);
        let bv = self.value(b);
        let mut value = vec![T::zero(); m * n];
        for i in 0..m {
            for l in 0..k {
                let x = av[i * k + l];
                if x == T::zero() {
                    continue;
                }
                let brow = &bv[l * n..(l + 1) * n];
                let orow = &mut value[i * n..(i + 1) * n];
                for (o, &bvv) in orow.iter_mut().zip(brow) {
                    *o = *o + x * bvv;
                }
            }
        }
        let rg = self.input_requires_grad(&[a, b]);
        Ok(self.push(value, vec![m, n], Op::MatMul { a, b }, rg))
    }

    /// `[m, n] + [n]` broadcast over rows.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                dimension: "bias length",
                actual: self.value(bias).len(),
                expected: n,
            });
        }
        let bv = self.value(bias).to_vec();
        let value: Vec<T> = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bv).map(|(&v, &b)| v + b).collect::<Vec<_>>())
            .collect();
        let rg = self.input_requires_grad(&[x, bias]);
        Ok(self.push(value, sx, Op::AddBias { x, bias }, rg))
    }

    /// 2D convolution over `[n, h, w, cin]` with kernel `[kh, kw, cin, cout]`.
    /// `same` zero-pads so the output keeps `ceil(dim / stride)`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        same: bool,
    ) -> Result<TensorId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 {
            return Err(Error::Shape {
                op: "conv2d",
                dimension: "input rank",
                actual: si.len(),
                expected: 4,
            });
        }
        if sk.len() != 4 {
            return Err(Error::Shape {
                op: "conv2d",
                dimension: "kernel rank",
                actual: sk.len(),
                expected: 4,
            });
        }
        if sk[0] % 2 == 0 || sk[1] % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel spatial size must be odd, got {}x{}", sk[0], sk[1]),
            ));
        }
        if si[3] != sk[2] {
            return Err(Error::Shape {
                op: "conv2d",
                dimension: "input channels",
                actual: si[3],
                expected: sk[2],
            });
        }
        if self.shape(bias) != [sk[3]] {
            return Err(Error::Shape {
                op: "conv2d",
                dimension: "bias length",
                actual: self.value(bias).len(),
                expected: sk[3],
            });
        }
        if !same && (si[1] < sk[0] || si[2] < sk[1]) {
            return Err(Error::Shape {
                op: "conv2d",
                dimension: "input height/width",
                actual: si[1].min(si[2]),
                expected: sk[0].max(sk[1]),
            });
        }
        let (value, oh, ow) = kernels::conv2d_forward(
            self.value(input),
            (si[0], si[1], si[2], si[3]),
            self.value(kernel),
            (sk[0], sk[1], sk[2], sk[3]),
            self.value(bias),
            stride,
            same,
        );
        let rg = self.input_requires_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            vec![si[0], oh, ow, sk[3]],
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                same,
            },
            rg,
        ))
    }

    /// Normalize over all leading axes per channel (last axis), then scale
    /// and shift. In batch mode the observed statistics are returned so the
    /// caller can maintain running averages.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        usage: BnUse<'_, T>,
        eps: T,
    ) -> Result<(TensorId, Option<BnStats<T>>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::invalid("batch_norm", "empty shape"))?;
        let rows = self.value(x).len() / c;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape {
                op: "batch_norm",
                dimension: "gamma/beta length",
                actual: self.value(gamma).len(),
                expected: c,
            });
        }
        let (mean, var, batch_stats) = match usage {
            BnUse::Batch => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for row in self.value(x).chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                let n = T::of(rows as f64);
                for m in mean.iter_mut() {
                    *m = *m / n;
                }
                for row in self.value(x).chunks(c) {
                    for ((va, &m), &v) in var.iter_mut().zip(&mean).zip(row) {
                        let d = v - m;
                        *va = *va + d * d;
                    }
                }
                for va in var.iter_mut() {
                    *va = *va / n;
                }
                (mean, var, true)
            }
            BnUse::Running { mean, var } => (mean.to_vec(), var.to_vec(), false),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let xv = self.value(x);
        let mut value = vec![T::zero(); xv.len()];
        for (i, v) in value.iter_mut().enumerate() {
            let ch = i % c;
            *v = gv[ch] * (xv[i] - mean[ch]) * inv_std[ch] + bv[ch];
        }
        let stats = batch_stats.then(|| BnStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let rg = self.input_requires_grad(&[x, gamma, beta]);
        let id = self.push(
            value,
            shape,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((id, stats))
    }

    /// Windowed softmax over a single-channel map `[1, h, w, 1]`: each output
    /// pixel is `exp(v/t)` divided by the sum of `exp(v/t)` over the window
    /// centered at it, with zero contribution outside the image.
    pub fn softmax_window(&mut self, x: TensorId, window: usize, temp: T) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != 1 {
            return Err(Error::Shape {
                op: "softmax_window",
                dimension: "channels",
                actual: *shape.last().unwrap_or(&0),
                expected: 1,
            });
        }
        if window % 2 == 0 {
            return Err(Error::invalid("softmax_window", "window must be odd"));
        }
        if temp <= T::zero() {
            return Err(Error::invalid("softmax_window", "temperature must be > 0"));
        }
        let (h, w) = (shape[1], shape[2]);
        if window > h && window > w {
            return Err(Error::invalid(
                "softmax_window",
                format!("window {window} exceeds both image dims {w}x{h}"),
            ));
        }
        let radius = window / 2;
        let xv = self.value(x);
        let m = xv.iter().cloned().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = xv.iter().map(|&v| ((v - m) / temp).exp()).collect();
        // A window sum can never be below its own center exponential; the
        // sliding accumulator may say otherwise for extreme value ranges, so
        // clamp before dividing.
        let floor = T::min_positive_value();
        let sums: Vec<T> = kernels::box_sum(&exps, w, h, radius)
            .into_iter()
            .zip(&exps)
            .map(|(s, &e)| s.max(e).max(floor))
            .collect();
        let value: Vec<T> = exps.iter().zip(&sums).map(|(&e, &s)| e / s).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            shape,
            Op::SoftmaxWindow {
                x,
                radius,
                temp,
                exps,
                sums,
            },
            rg,
        ))
    }

    /// Resize `[n, h, w, c]` to a new spatial size with bilinear filtering
    /// (align-corners-false).
    pub fn bilinear_resize(&mut self, x: TensorId, oh: usize, ow: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape {
                op: "bilinear_resize",
                dimension: "rank",
                actual: shape.len(),
                expected: 4,
            });
        }
        if oh < 1 || ow < 1 {
            return Err(Error::invalid("bilinear_resize", "output dim < 1"));
        }
        let value = kernels::bilinear_resize_forward(
            self.value(x),
            (shape[0], shape[1], shape[2], shape[3]),
            oh,
            ow,
        );
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            vec![shape[0], oh, ow, shape[3]],
            Op::BilinearResize { x },
            rg,
        ))
    }

    /// Resize by a scale factor; output dims are `round(dim * factor)`.
    pub fn bilinear_resize_by(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        if factor <= 0.0 {
            return Err(Error::invalid("bilinear_resize", "factor must be > 0"));
        }
        let shape = self.shape(x);
        let oh = (shape[1] as f64 * factor).round() as usize;
        let ow = (shape[2] as f64 * factor).round() as usize;
        self.bilinear_resize(x, oh, ow)
    }

    /// Merge a per-scale stack `[1, h, w, n]` into one map `[1, h, w, 1]`:
    /// at each pixel, the responses weighted by their own softmax across the
    /// scale axis.
    pub fn scale_merge(&mut self, stack: TensorId, temp: T) -> Result<TensorId> {
        let shape = self.shape(stack).to_vec();
        if shape.len() != 4 || shape[3] < 1 {
            return Err(Error::Shape {
                op: "scale_merge",
                dimension: "levels",
                actual: *shape.last().unwrap_or(&0),
                expected: 1,
            });
        }
        let n = shape[3];
        let weights = softmax_rows(self.value(stack), n, temp);
        let value: Vec<T> = self
            .value(stack)
            .chunks(n)
            .zip(weights.chunks(n))
            .map(|(xs, ws)| xs.iter().zip(ws).map(|(&x, &w)| x * w).sum())
            .collect();
        let rg = self.requires_grad(stack);
        Ok(self.push(
            value,
            vec![1, shape[1], shape[2], 1],
            Op::ScaleMerge {
                stack,
                temp,
                weights,
            },
            rg,
        ))
    }

    /// Read `[k, c]` rows from a map `[1, h, w, c]` at integer pixels.
    pub fn gather_pixels(&mut self, map: TensorId, xs: &[usize], ys: &[usize]) -> Result<TensorId> {
        let shape = self.shape(map).to_vec();
        let (h, w, c) = (shape[1], shape[2], shape[3]);
        for (&x, &y) in xs.iter().zip(ys) {
            if x >= w || y >= h {
                return Err(Error::invalid(
                    "gather_pixels",
                    format!("pixel ({x}, {y}) outside {w}x{h}"),
                ));
            }
        }
        let mut value = vec![T::zero(); xs.len() * c];
        for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
            let src = (y * w + x) * c;
            value[i * c..(i + 1) * c].copy_from_slice(&self.value(map)[src..src + c]);
        }
        let rg = self.requires_grad(map);
        Ok(self.push(
            value,
            vec![xs.len(), c],
            Op::GatherPixels {
                map,
                xs: xs.to_vec(),
                ys: ys.to_vec(),
            },
            rg,
        ))
    }

    /// Extract `[k, s, s]` windows (`s = 2 * radius + 1`) centered at integer
    /// pixels of a single-channel map. Windows must be fully inside.
    pub fn gather_windows(
        &mut self,
        map: TensorId,
        xs: &[usize],
        ys: &[usize],
        radius: usize,
    ) -> Result<TensorId> {
        let shape = self.shape(map).to_vec();
        let (h, w) = (shape[1], shape[2]);
        for (&x, &y) in xs.iter().zip(ys) {
            if x < radius || y < radius || x + radius >= w || y + radius >= h {
                return Err(Error::invalid(
                    "gather_windows",
                    format!("window at ({x}, {y}) radius {radius} leaves {w}x{h}"),
                ));
            }
        }
        let s = 2 * radius + 1;
        let mut value = vec![T::zero(); xs.len() * s * s];
        for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
            for dy in 0..s {
                let row = (y + dy - radius) * w + x - radius;
                let dst = (i * s + dy) * s;
                value[dst..dst + s].copy_from_slice(&self.value(map)[row..row + s]);
            }
        }
        let rg = self.requires_grad(map);
        Ok(self.push(
            value,
            vec![xs.len(), s, s],
            Op::GatherWindows {
                map,
                xs: xs.to_vec(),
                ys: ys.to_vec(),
                radius,
            },
            rg,
        ))
    }

    /// Softmax-weighted mean pixel offset per window: `[k, s, s] -> [k, 2]`
    /// holding `(dx, dy)` relative to the window center.
    pub fn softargmax_2d(&mut self, windows: TensorId, temp: T) -> Result<TensorId> {
        let shape = self.shape(windows).to_vec();
        if shape.len() != 3 || shape[1] != shape[2] || shape[1] % 2 == 0 {
            return Err(Error::invalid(
                "softargmax_2d",
                format!("expected [k, s, s] with odd s, got {shape:?}"),
            ));
        }
        if temp <= T::zero() {
            return Err(Error::invalid("softargmax_2d", "temperature must be > 0"));
        }
        let s = shape[1];
        let r = (s / 2) as f64;
        let weights = softmax_rows(self.value(windows), s * s, temp);
        let mut value = vec![T::zero(); shape[0] * 2];
        for (k, wrow) in weights.chunks(s * s).enumerate() {
            let mut dx = T::zero();
            let mut dy = T::zero();
            for row in 0..s {
                for col in 0..s {
                    let w = wrow[row * s + col];
                    dx = dx + w * T::of(col as f64 - r);
                    dy = dy + w * T::of(row as f64 - r);
                }
            }
            value[k * 2] = dx;
            value[k * 2 + 1] = dy;
        }
        let rg = self.requires_grad(windows);
        Ok(self.push(
            value,
            vec![shape[0], 2],
            Op::SoftArgmax2d {
                windows,
                temp,
                weights,
            },
            rg,
        ))
    }

    /// Softmax-weighted mean of `coords` along the last axis: `[k, n] -> [k]`.
    pub fn softargmax_axis(&mut self, x: TensorId, coords: &[T], temp: T) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || *shape.last().unwrap() == 0 {
            return Err(Error::invalid("softargmax_axis", "empty input"));
        }
        let n = *shape.last().unwrap();
        if coords.len() != n {
            return Err(Error::Shape {
                op: "softargmax_axis",
                dimension: "coords length",
                actual: coords.len(),
                expected: n,
            });
        }
        if temp <= T::zero() {
            return Err(Error::invalid("softargmax_axis", "temperature must be > 0"));
        }
        let k = self.value(x).len() / n;
        let weights = softmax_rows(self.value(x), n, temp);
        let value: Vec<T> = weights
            .chunks(n)
            .map(|ws| ws.iter().zip(coords).map(|(&w, &c)| w * c).sum())
            .collect();
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            vec![k],
            Op::SoftArgmaxAxis {
                x,
                coords: coords.to_vec(),
                temp,
                weights,
            },
            rg,
        ))
    }

    /// Crop oriented square patches with bilinear sampling. `image` is
    /// `[1, h, w, 1]`; `xs/ys/sides/thetas` are `[k]`. Output `[k, o, o, 1]`.
    /// Out-of-bounds samples read zero. Gradients flow to the image values
    /// and to all four keypoint attribute vectors.
    pub fn sample_patches(
        &mut self,
        image: TensorId,
        xs: TensorId,
        ys: TensorId,
        sides: TensorId,
        thetas: TensorId,
        out_size: usize,
    ) -> Result<TensorId> {
        let si = self.shape(image).to_vec();
        if si.len() != 4 || si[0] != 1 || si[3] != 1 {
            return Err(Error::invalid(
                "sample_patches",
                format!("image must be [1, h, w, 1], got {si:?}"),
            ));
        }
        if out_size < 2 {
            return Err(Error::invalid("sample_patches", "out_size must be >= 2"));
        }
        let k = self.value(xs).len();
        for id in [ys, sides, thetas] {
            if self.value(id).len() != k {
                return Err(Error::Shape {
                    op: "sample_patches",
                    dimension: "keypoint count",
                    actual: self.value(id).len(),
                    expected: k,
                });
            }
        }
        for (&x, &y) in self.value(xs).iter().zip(self.value(ys)) {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::invalid("sample_patches", "non-finite patch center"));
            }
        }
        for &s in self.value(sides) {
            if !(s > T::zero()) {
                return Err(Error::invalid("sample_patches", "side must be > 0"));
            }
        }
        let value = kernels::sample_patches_forward(
            self.value(image),
            (si[1], si[2]),
            self.value(xs),
            self.value(ys),
            self.value(sides),
            self.value(thetas),
            out_size,
        );
        let rg = self.input_requires_grad(&[image, xs, ys, sides, thetas]);
        Ok(self.push(
            value,
            vec![k, out_size, out_size, 1],
            Op::SamplePatches {
                image,
                xs,
                ys,
                sides,
                thetas,
                out_size,
            },
            rg,
        ))
    }

    /// Normalize each row of `[k, d]` to unit l2 norm.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "l2_normalize_rows",
                dimension: "rank",
                actual: shape.len(),
                expected: 2,
            });
        }
        let d = shape[1];
        let tiny = T::of(1e-12);
        let inv_norms: Vec<T> = self
            .value(x)
            .chunks(d)
            .map(|row| {
                let sq: T = row.iter().map(|&v| v * v).sum();
                T::one() / (sq + tiny).sqrt()
            })
            .collect();
        let value: Vec<T> = self
            .value(x)
            .chunks(d)
            .zip(&inv_norms)
            .flat_map(|(row, &inv)| row.iter().map(move |&v| v * inv).collect::<Vec<_>>())
            .collect();
        let rg = self.requires_grad(x);
        Ok(self.push(value, shape, Op::L2NormalizeRows { x, inv_norms }, rg))
    }
}
