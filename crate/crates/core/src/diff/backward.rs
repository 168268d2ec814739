//! Reverse replay of recorded ops.

use super::kernels;
use super::ops::Op;
use super::{Gradients, Scalar, Tape, TensorId};
use crate::{Error, Result};

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: TensorId, len: usize) -> &mut [T] {
    grads[id.0]
        .get_or_insert_with(|| vec![T::zero(); len])
        .as_mut_slice()
}

impl<T: Scalar> Op<T> {
    fn visit_inputs(&self, mut f: impl FnMut(TensorId)) {
        match self {
            Op::Leaf => {}
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::MatMul { a, b } => {
                f(*a);
                f(*b);
            }
            Op::Affine { x, .. }
            | Op::Exp { x }
            | Op::Relu { x }
            | Op::LeakyRelu { x, .. }
            | Op::WrapAngle { x }
            | Op::SumAll { x }
            | Op::MeanAll { x }
            | Op::SumRows { x }
            | Op::Reshape { x }
            | Op::SliceChannel { x, .. }
            | Op::BilinearResize { x }
            | Op::SoftmaxWindow { x, .. }
            | Op::SoftArgmaxAxis { x, .. }
            | Op::L2NormalizeRows { x, .. } => f(*x),
            Op::Atan2 { y, x } => {
                f(*y);
                f(*x);
            }
            Op::StackChannels { inputs } => inputs.iter().copied().for_each(f),
            Op::AddBias { x, bias } => {
                f(*x);
                f(*bias);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => {
                f(*input);
                f(*kernel);
                f(*bias);
            }
            Op::BatchNorm {
                x, gamma, beta, ..
            } => {
                f(*x);
                f(*gamma);
                f(*beta);
            }
            Op::ScaleMerge { stack, .. } => f(*stack),
            Op::GatherPixels { map, .. } | Op::GatherWindows { map, .. } => f(*map),
            Op::SoftArgmax2d { windows, .. } => f(*windows),
            Op::SamplePatches {
                image,
                xs,
                ys,
                sides,
                thetas,
                ..
            } => {
                f(*image);
                f(*xs);
                f(*ys);
                f(*sides);
                f(*thetas);
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Run reverse-mode differentiation from a scalar root. Gradients
    /// accumulate as sums over all consumers; the replay is deterministic,
    /// so repeated calls yield bit-identical results.
    pub fn backward(&self, root: TensorId) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                dimension: "root element count",
                actual: self.value(root).len(),
                expected: 1,
            });
        }
        let mut needed = vec![false; self.nodes.len()];
        needed[root.0] = true;
        for id in (0..=root.0).rev() {
            if !needed[id] || !self.nodes[id].requires_grad {
                continue;
            }
            self.nodes[id].op.visit_inputs(|input| {
                if self.nodes[input.0].requires_grad {
                    needed[input.0] = true;
                }
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            if !needed[id] || grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            self.backprop_node(TensorId(id), &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(&self, id: TensorId, g: &[T], grads: &mut Vec<Option<Vec<T>>>) {
        let node = &self.nodes[id.0];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for side in [*a, *b] {
                    if self.wants(side) {
                        let d = slot(grads, side, g.len());
                        for (dv, &gv) in d.iter_mut().zip(g) {
                            *dv = *dv + gv;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    let d = slot(grads, *a, g.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv = *dv + gv;
                    }
                }
                if self.wants(*b) {
                    let d = slot(grads, *b, g.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv = *dv - gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    let d = slot(grads, *a, g.len());
                    for ((dv, &gv), &ov) in d.iter_mut().zip(g).zip(bv) {
                        *dv = *dv + gv * ov;
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let d = slot(grads, *b, g.len());
                    for ((dv, &gv), &ov) in d.iter_mut().zip(g).zip(av) {
                        *dv = *dv + gv * ov;
                    }
                }
            }
            Op::Affine { x, mul, .. } => {
                if self.wants(*x) {
                    let d = slot(grads, *x, g.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv = *dv + gv * *mul;
                    }
                }
            }
            Op::Exp { x } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let d = slot(grads, *x, g.len());
                    for ((dv, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *dv = *dv + gv * yv;
                    }
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let d = slot(grads, *x, g.len());
                    for ((dv, &gv), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *dv = *dv + gv;
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let d = slot(grads, *x, g.len());
                    for ((dv, &gv), &v) in d.iter_mut().zip(g).zip(xv) {
                        *dv = *dv + if v > T::zero() { gv } else { gv * *slope };
                    }
                }
            }
            Op::WrapAngle { x } => {
                if self.wants(*x) {
                    let d = slot(grads, *x, g.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv = *dv + gv;
                    }
                }
            }
            Op::Atan2 { y, x } => {
                let yv = self.value(*y);
                let xv = self.value(*x);
                let tiny = T::of(1e-30);
                if self.wants(*y) {
                    let d = slot(grads, *y, g.len());
                    for (i, dv) in d.iter_mut().enumerate() {
                        let r2 = xv[i] * xv[i] + yv[i] * yv[i];
                        if r2 > tiny {
                            *dv = *dv + g[i] * xv[i] / r2;
                        }
                    }
                }
                if self.wants(*x) {
                    let d = slot(grads, *x, g.len());
                    for (i, dv) in d.iter_mut().enumerate() {
                        let r2 = xv[i] * xv[i] + yv[i] * yv[i];
                        if r2 > tiny {
                            *dv = *dv - g[i] * yv[i] / r2;
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if self.wants(*x) {
                    let len = self.value(*x).len();
                    let d = slot(grads, *x, len);
                    for dv in d.iter_mut() {
                        *dv = *dv + g[0];
                    }
                }
            }
            Op::MeanAll { x } => {
                if self.wants(*x) {
                    let len = self.value(*x).len();
                    let gv = g[0] / T::of(len as f64);
                    let d = slot(grads, *x, len);
                    for dv in d.iter_mut() {
                        *dv = *dv + gv;
                    }
                }
            }
            Op::SumRows { x } => {
                if self.wants(*x) {
                    let len = self.value(*x).len();
                    let d = len / g.len();
                    let dx = slot(grads, *x, len);
                    for (row, &gv) in g.iter().enumerate() {
                        for dv in &mut dx[row * d..(row + 1) * d] {
                            *dv = *dv + gv;
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    let d = slot(grads, *x, g.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv = *dv + gv;
                    }
                }
            }
            Op::StackChannels { inputs } => {
                let n = inputs.len();
                for (i, &input) in inputs.iter().enumerate() {
                    if self.wants(input) {
                        let len = self.value(input).len();
                        let d = slot(grads, input, len);
                        for (p, dv) in d.iter_mut().enumerate() {
                            *dv = *dv + g[p * n + i];
                        }
                    }
                }
            }
            Op::SliceChannel { x, channel } => {
                if self.wants(*x) {
                    let len = self.value(*x).len();
                    let c = self.shape(*x)[3];
                    let d = slot(grads, *x, len);
                    for (p, &gv) in g.iter().enumerate() {
                        d[p * c + channel] = d[p * c + channel] + gv;
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let bv = self.value(*b);
                    let da = slot(grads, *a, m * k);
                    for i in 0..m {
                        for l in 0..k {
                            let mut s = T::zero();
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bv[l * n..(l + 1) * n];
                            for (&gv, &bvv) in grow.iter().zip(brow) {
                                s = s + gv * bvv;
                            }
                            da[i * k + l] = da[i * k + l] + s;
                        }
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let db = slot(grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for l in 0..k {
                            let x = av[i * k + l];
                            if x == T::zero() {
                                continue;
                            }
                            let drow = &mut db[l * n..(l + 1) * n];
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv = *dv + x * gv;
                            }
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    let d = slot(grads, *x, g.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv = *dv + gv;
                    }
                }
                if self.wants(*bias) {
                    let n = self.value(*bias).len();
                    let d = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        for (dv, &gv) in d.iter_mut().zip(row) {
                            *dv = *dv + gv;
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                same,
            } => {
                let si = self.shape(*input);
                let sk = self.shape(*kernel);
                let dims_i = (si[0], si[1], si[2], si[3]);
                let dims_k = (sk[0], sk[1], sk[2], sk[3]);
                let want_i = self.wants(*input);
                let want_k = self.wants(*kernel);
                let want_b = self.wants(*bias);
                let mut di = want_i.then(|| vec![T::zero(); self.value(*input).len()]);
                let mut dk = want_k.then(|| vec![T::zero(); self.value(*kernel).len()]);
                let mut db = want_b.then(|| vec![T::zero(); self.value(*bias).len()]);
                kernels::conv2d_backward(
                    g,
                    self.value(*input),
                    dims_i,
                    self.value(*kernel),
                    dims_k,
                    *stride,
                    *same,
                    di.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (id, buf) in [(*input, di), (*kernel, dk), (*bias, db)] {
                    if let Some(buf) = buf {
                        let d = slot(grads, id, buf.len());
                        for (dv, &bv) in d.iter_mut().zip(&buf) {
                            *dv = *dv + bv;
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let c = mean.len();
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let rows = xv.len() / c;
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (grow, xrow) in g.chunks(c).zip(xv.chunks(c)) {
                    for ch in 0..c {
                        let xh = (xrow[ch] - mean[ch]) * inv_std[ch];
                        sum_g[ch] = sum_g[ch] + grow[ch];
                        sum_gx[ch] = sum_gx[ch] + grow[ch] * xh;
                    }
                }
                if self.wants(*gamma) {
                    let d = slot(grads, *gamma, c);
                    for (dv, &s) in d.iter_mut().zip(&sum_gx) {
                        *dv = *dv + s;
                    }
                }
                if self.wants(*beta) {
                    let d = slot(grads, *beta, c);
                    for (dv, &s) in d.iter_mut().zip(&sum_g) {
                        *dv = *dv + s;
                    }
                }
                if self.wants(*x) {
                    let n = T::of(rows as f64);
                    let d = slot(grads, *x, xv.len());
                    for (i, dv) in d.iter_mut().enumerate() {
                        let ch = i % c;
                        let scale = gv[ch] * inv_std[ch];
                        if *batch_stats {
                            let xh = (xv[i] - mean[ch]) * inv_std[ch];
                            *dv = *dv + scale * (g[i] - sum_g[ch] / n - xh * sum_gx[ch] / n);
                        } else {
                            *dv = *dv + scale * g[i];
                        }
                    }
                }
            }
            Op::SoftmaxWindow {
                x,
                radius,
                temp,
                exps,
                sums,
            } => {
                if self.wants(*x) {
                    let shape = self.shape(id);
                    let (h, w) = (shape[1], shape[2]);
                    let out = &node.value;
                    let q: Vec<T> = g
                        .iter()
                        .zip(out)
                        .zip(sums)
                        .map(|((&gv, &ov), &sv)| gv * ov / sv)
                        .collect();
                    let b = kernels::box_sum(&q, w, h, *radius);
                    let d = slot(grads, *x, g.len());
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv = *dv + (g[i] * out[i] - exps[i] * b[i]) / *temp;
                    }
                }
            }
            Op::BilinearResize { x } => {
                if self.wants(*x) {
                    let si = self.shape(*x);
                    let so = self.shape(id);
                    let dims = (si[0], si[1], si[2], si[3]);
                    let d = slot(grads, *x, self.value(*x).len());
                    kernels::bilinear_resize_backward(g, dims, so[1], so[2], d);
                }
            }
            Op::ScaleMerge {
                stack,
                temp,
                weights,
            } => {
                if self.wants(*stack) {
                    let n = self.shape(*stack)[3];
                    let xv = self.value(*stack);
                    let y = &node.value;
                    let d = slot(grads, *stack, xv.len());
                    for p in 0..y.len() {
                        let gp = g[p];
                        for ch in 0..n {
                            let i = p * n + ch;
                            let w = weights[i];
                            d[i] = d[i] + gp * w * (T::one() + (xv[i] - y[p]) / *temp);
                        }
                    }
                }
            }
            Op::GatherPixels { map, xs, ys } => {
                if self.wants(*map) {
                    let shape = self.shape(*map);
                    let (w, c) = (shape[2], shape[3]);
                    let d = slot(grads, *map, self.value(*map).len());
                    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
                        let dst = (y * w + x) * c;
                        for ch in 0..c {
                            d[dst + ch] = d[dst + ch] + g[i * c + ch];
                        }
                    }
                }
            }
            Op::GatherWindows {
                map,
                xs,
                ys,
                radius,
            } => {
                if self.wants(*map) {
                    let w = self.shape(*map)[2];
                    let s = 2 * radius + 1;
                    let d = slot(grads, *map, self.value(*map).len());
                    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
                        for dy in 0..s {
                            let row = (y + dy - radius) * w + x - radius;
                            let src = (i * s + dy) * s;
                            for dx in 0..s {
                                d[row + dx] = d[row + dx] + g[src + dx];
                            }
                        }
                    }
                }
            }
            Op::SoftArgmax2d {
                windows,
                temp,
                weights,
            } => {
                if self.wants(*windows) {
                    let s = self.shape(*windows)[1];
                    let r = (s / 2) as f64;
                    let out = &node.value;
                    let d = slot(grads, *windows, self.value(*windows).len());
                    for (k, wrow) in weights.chunks(s * s).enumerate() {
                        let (gdx, gdy) = (g[k * 2], g[k * 2 + 1]);
                        let (dx, dy) = (out[k * 2], out[k * 2 + 1]);
                        for row in 0..s {
                            for col in 0..s {
                                let i = (k * s + row) * s + col;
                                let cx = T::of(col as f64 - r);
                                let cy = T::of(row as f64 - r);
                                d[i] = d[i]
                                    + wrow[row * s + col] * (gdx * (cx - dx) + gdy * (cy - dy))
                                        / *temp;
                            }
                        }
                    }
                }
            }
            Op::SoftArgmaxAxis {
                x,
                coords,
                temp,
                weights,
            } => {
                if self.wants(*x) {
                    let n = coords.len();
                    let out = &node.value;
                    let d = slot(grads, *x, self.value(*x).len());
                    for (k, wrow) in weights.chunks(n).enumerate() {
                        for ch in 0..n {
                            let i = k * n + ch;
                            d[i] = d[i] + g[k] * wrow[ch] * (coords[ch] - out[k]) / *temp;
                        }
                    }
                }
            }
            Op::SamplePatches {
                image,
                xs,
                ys,
                sides,
                thetas,
                out_size,
            } => {
                let si = self.shape(*image);
                let k = self.value(*xs).len();
                let want_img = self.wants(*image);
                let mut di = want_img.then(|| vec![T::zero(); self.value(*image).len()]);
                let mut dxs = vec![T::zero(); k];
                let mut dys = vec![T::zero(); k];
                let mut dsides = vec![T::zero(); k];
                let mut dthetas = vec![T::zero(); k];
                kernels::sample_patches_backward(
                    g,
                    self.value(*image),
                    (si[1], si[2]),
                    self.value(*xs),
                    self.value(*ys),
                    self.value(*sides),
                    self.value(*thetas),
                    *out_size,
                    di.as_deref_mut(),
                    &mut dxs,
                    &mut dys,
                    &mut dsides,
                    &mut dthetas,
                );
                if let Some(di) = di {
                    let d = slot(grads, *image, di.len());
                    for (dv, &v) in d.iter_mut().zip(&di) {
                        *dv = *dv + v;
                    }
                }
                for (tid, buf) in [(*xs, dxs), (*ys, dys), (*sides, dsides), (*thetas, dthetas)] {
                    if self.wants(tid) {
                        let d = slot(grads, tid, k);
                        for (dv, &v) in d.iter_mut().zip(&buf) {
                            *dv = *dv + v;
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, inv_norms } => {
                if self.wants(*x) {
                    let dcols = self.shape(*x)[1];
                    let y = &node.value;
                    let d = slot(grads, *x, y.len());
                    for (row, &inv) in inv_norms.iter().enumerate() {
                        let base = row * dcols;
                        let mut dot = T::zero();
                        for i in base..base + dcols {
                            dot = dot + g[i] * y[i];
                        }
                        for i in base..base + dcols {
                            d[i] = d[i] + inv * (g[i] - y[i] * dot);
                        }
                    }
                }
            }
        }
    }
}
