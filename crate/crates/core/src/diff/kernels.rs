//! Dense numeric kernels shared by the tape ops. Pure functions over flat
//! row-major buffers; no tape bookkeeping here.

use super::Scalar;

/// Output size and leading pad for a convolution. `same` pads so that
/// `out = ceil(in / stride)`; otherwise the convolution is valid.
pub fn conv_extent(input: usize, kernel: usize, stride: usize, same: bool) -> (usize, usize) {
    if same {
        let out = input.div_ceil(stride);
        let pad_total = ((out - 1) * stride + kernel).saturating_sub(input);
        (out, pad_total / 2)
    } else {
        ((input - kernel) / stride + 1, 0)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    (n, h, w, cin): (usize, usize, usize, usize),
    kernel: &[T],
    (kh, kw, _, cout): (usize, usize, usize, usize),
    bias: &[T],
    stride: usize,
    same: bool,
) -> (Vec<T>, usize, usize) {
    let (oh, pad_y) = conv_extent(h, kh, stride, same);
    let (ow, pad_x) = conv_extent(w, kw, stride, same);
    let mut out = vec![T::zero(); n * oh * ow * cout];
    let mut acc = vec![T::zero(); cout];
    for b in 0..n {
        let in_base = b * h * w * cin;
        for oy in 0..oh {
            for ox in 0..ow {
                acc.copy_from_slice(bias);
                let y0 = (oy * stride) as isize - pad_y as isize;
                let x0 = (ox * stride) as isize - pad_x as isize;
                for ky in 0..kh {
                    let iy = y0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = x0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_off = in_base + ((iy as usize * w) + ix as usize) * cin;
                        let k_off = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let iv = input[in_off + ci];
                            let krow = &kernel[k_off + ci * cout..k_off + (ci + 1) * cout];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a = *a + iv * kv;
                            }
                        }
                    }
                }
                let out_off = ((b * oh + oy) * ow + ox) * cout;
                out[out_off..out_off + cout].copy_from_slice(&acc);
            }
        }
    }
    (out, oh, ow)
}

/// Gradients of a convolution w.r.t. input, kernel, and bias. Any output
/// buffer may be `None` to skip that gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    grad_out: &[T],
    input: &[T],
    (n, h, w, cin): (usize, usize, usize, usize),
    kernel: &[T],
    (kh, kw, _, cout): (usize, usize, usize, usize),
    stride: usize,
    same: bool,
    mut d_input: Option<&mut [T]>,
    mut d_kernel: Option<&mut [T]>,
    d_bias: Option<&mut [T]>,
) {
    let (oh, pad_y) = conv_extent(h, kh, stride, same);
    let (ow, pad_x) = conv_extent(w, kw, stride, same);
    if let Some(db) = d_bias {
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = &grad_out[((b * oh + oy) * ow + ox) * cout..][..cout];
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
            }
        }
    }
    for b in 0..n {
        let in_base = b * h * w * cin;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = &grad_out[((b * oh + oy) * ow + ox) * cout..][..cout];
                let y0 = (oy * stride) as isize - pad_y as isize;
                let x0 = (ox * stride) as isize - pad_x as isize;
                for ky in 0..kh {
                    let iy = y0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = x0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_off = in_base + ((iy as usize * w) + ix as usize) * cin;
                        let k_off = (ky * kw + kx) * cin * cout;
                        if let Some(di) = d_input.as_deref_mut() {
                            for ci in 0..cin {
                                let krow = &kernel[k_off + ci * cout..][..cout];
                                let mut s = T::zero();
                                for (&kv, &gv) in krow.iter().zip(g) {
                                    s = s + kv * gv;
                                }
                                di[in_off + ci] = di[in_off + ci] + s;
                            }
                        }
                        if let Some(dk) = d_kernel.as_deref_mut() {
                            for ci in 0..cin {
                                let iv = input[in_off + ci];
                                let drow = &mut dk[k_off + ci * cout..][..cout];
                                for (d, &gv) in drow.iter_mut().zip(g) {
                                    *d = *d + iv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Sum over a `(2r+1) x (2r+1)` window centered at each pixel, zeros outside
/// the image. Separable: rows then columns.
pub fn box_sum<T: Scalar>(map: &[T], w: usize, h: usize, radius: usize) -> Vec<T> {
    let mut rows = vec![T::zero(); w * h];
    for y in 0..h {
        let src = &map[y * w..(y + 1) * w];
        let dst = &mut rows[y * w..(y + 1) * w];
        let mut acc = T::zero();
        for x in 0..=radius.min(w - 1) {
            acc = acc + src[x];
        }
        dst[0] = acc;
        for x in 1..w {
            if x + radius < w {
                acc = acc + src[x + radius];
            }
            if x > radius {
                acc = acc - src[x - radius - 1];
            }
            dst[x] = acc;
        }
    }
    let mut out = vec![T::zero(); w * h];
    for x in 0..w {
        let mut acc = T::zero();
        for y in 0..=radius.min(h - 1) {
            acc = acc + rows[y * w + x];
        }
        out[x] = acc;
        for y in 1..h {
            if y + radius < h {
                acc = acc + rows[(y + radius) * w + x];
            }
            if y > radius {
                acc = acc - rows[(y - radius - 1) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Bilinear resize, align-corners-false, border replicate.
pub fn bilinear_resize_forward<T: Scalar>(
    input: &[T],
    (n, h, w, c): (usize, usize, usize, usize),
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * oh * ow * c];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for b in 0..n {
        for oy in 0..oh {
            let src_y = (oy as f64 + 0.5) * sy - 0.5;
            let y0f = src_y.floor();
            let fy = T::of(src_y - y0f);
            let y0 = (y0f as isize).clamp(0, h as isize - 1) as usize;
            let y1 = (y0f as isize + 1).clamp(0, h as isize - 1) as usize;
            for ox in 0..ow {
                let src_x = (ox as f64 + 0.5) * sx - 0.5;
                let x0f = src_x.floor();
                let fx = T::of(src_x - x0f);
                let x0 = (x0f as isize).clamp(0, w as isize - 1) as usize;
                let x1 = (x0f as isize + 1).clamp(0, w as isize - 1) as usize;
                let o = T::one();
                let out_off = ((b * oh + oy) * ow + ox) * c;
                let i00 = ((b * h + y0) * w + x0) * c;
                let i01 = ((b * h + y0) * w + x1) * c;
                let i10 = ((b * h + y1) * w + x0) * c;
                let i11 = ((b * h + y1) * w + x1) * c;
                for ch in 0..c {
                    out[out_off + ch] = input[i00 + ch] * (o - fx) * (o - fy)
                        + input[i01 + ch] * fx * (o - fy)
                        + input[i10 + ch] * (o - fx) * fy
                        + input[i11 + ch] * fx * fy;
                }
            }
        }
    }
    out
}

pub fn bilinear_resize_backward<T: Scalar>(
    grad_out: &[T],
    (n, h, w, c): (usize, usize, usize, usize),
    oh: usize,
    ow: usize,
    d_input: &mut [T],
) {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for b in 0..n {
        for oy in 0..oh {
            let src_y = (oy as f64 + 0.5) * sy - 0.5;
            let y0f = src_y.floor();
            let fy = T::of(src_y - y0f);
            let y0 = (y0f as isize).clamp(0, h as isize - 1) as usize;
            let y1 = (y0f as isize + 1).clamp(0, h as isize - 1) as usize;
            for ox in 0..ow {
                let src_x = (ox as f64 + 0.5) * sx - 0.5;
                let x0f = src_x.floor();
                let fx = T::of(src_x - x0f);
                let x0 = (x0f as isize).clamp(0, w as isize - 1) as usize;
                let x1 = (x0f as isize + 1).clamp(0, w as isize - 1) as usize;
                let o = T::one();
                let out_off = ((b * oh + oy) * ow + ox) * c;
                let i00 = ((b * h + y0) * w + x0) * c;
                let i01 = ((b * h + y0) * w + x1) * c;
                let i10 = ((b * h + y1) * w + x0) * c;
                let i11 = ((b * h + y1) * w + x1) * c;
                for ch in 0..c {
                    let g = grad_out[out_off + ch];
                    d_input[i00 + ch] = d_input[i00 + ch] + g * (o - fx) * (o - fy);
                    d_input[i01 + ch] = d_input[i01 + ch] + g * fx * (o - fy);
                    d_input[i10 + ch] = d_input[i10 + ch] + g * (o - fx) * fy;
                    d_input[i11 + ch] = d_input[i11 + ch] + g * fx * fy;
                }
            }
        }
    }
}

/// Normalized patch-grid offset of output column/row `i`: samples are pixel
/// centers of an `out`-cell grid spanning `[-1/2, 1/2]` in patch units.
#[inline]
pub fn patch_alpha(i: usize, out: usize) -> f64 {
    (i as f64 - (out as f64 - 1.0) / 2.0) / out as f64
}

/// Bilinear read with zero outside the image; returns the value and the
/// spatial derivatives (dv/dx, dv/dy).
#[inline]
fn sample_zero_pad<T: Scalar>(image: &[T], w: usize, h: usize, px: f64, py: f64) -> (T, T, T) {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = T::of(px - x0);
    let fy = T::of(py - y0);
    let xi = x0 as isize;
    let yi = y0 as isize;
    let at = |x: isize, y: isize| -> T {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            T::zero()
        } else {
            image[y as usize * w + x as usize]
        }
    };
    let v00 = at(xi, yi);
    let v01 = at(xi + 1, yi);
    let v10 = at(xi, yi + 1);
    let v11 = at(xi + 1, yi + 1);
    let o = T::one();
    let val = v00 * (o - fx) * (o - fy) + v01 * fx * (o - fy) + v10 * (o - fx) * fy + v11 * fx * fy;
    let dvdx = (v01 - v00) * (o - fy) + (v11 - v10) * fy;
    let dvdy = (v10 - v00) * (o - fx) + (v11 - v01) * fx;
    (val, dvdx, dvdy)
}

#[allow(clippy::too_many_arguments)]
pub fn sample_patches_forward<T: Scalar>(
    image: &[T],
    (h, w): (usize, usize),
    xs: &[T],
    ys: &[T],
    sides: &[T],
    thetas: &[T],
    out_size: usize,
) -> Vec<T> {
    let k = xs.len();
    let mut out = vec![T::zero(); k * out_size * out_size];
    for p in 0..k {
        let (cx, cy, side, th) = (xs[p].to64(), ys[p].to64(), sides[p].to64(), thetas[p].to64());
        let (sin, cos) = th.sin_cos();
        for v in 0..out_size {
            let av = patch_alpha(v, out_size);
            for u in 0..out_size {
                let au = patch_alpha(u, out_size);
                let px = cx + side * (cos * au - sin * av);
                let py = cy + side * (sin * au + cos * av);
                let (val, _, _) = sample_zero_pad(image, w, h, px, py);
                out[(p * out_size + v) * out_size + u] = val;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn sample_patches_backward<T: Scalar>(
    grad_out: &[T],
    image: &[T],
    (h, w): (usize, usize),
    xs: &[T],
    ys: &[T],
    sides: &[T],
    thetas: &[T],
    out_size: usize,
    mut d_image: Option<&mut [T]>,
    d_xs: &mut [T],
    d_ys: &mut [T],
    d_sides: &mut [T],
    d_thetas: &mut [T],
) {
    for p in 0..xs.len() {
        let (cx, cy, side, th) = (xs[p].to64(), ys[p].to64(), sides[p].to64(), thetas[p].to64());
        let (sin, cos) = th.sin_cos();
        let (sin_t, cos_t, side_t) = (T::of(sin), T::of(cos), T::of(side));
        for v in 0..out_size {
            let av = patch_alpha(v, out_size);
            for u in 0..out_size {
                let g = grad_out[(p * out_size + v) * out_size + u];
                if g == T::zero() {
                    continue;
                }
                let au = patch_alpha(u, out_size);
                let rot_x = T::of(cos * au - sin * av);
                let rot_y = T::of(sin * au + cos * av);
                let px = cx + side * (cos * au - sin * av);
                let py = cy + side * (sin * au + cos * av);
                let (_, dvdx, dvdy) = sample_zero_pad(image, w, h, px, py);
                d_xs[p] = d_xs[p] + g * dvdx;
                d_ys[p] = d_ys[p] + g * dvdy;
                d_sides[p] = d_sides[p] + g * (dvdx * rot_x + dvdy * rot_y);
                // d(rot)/dθ rotates the offset by 90 degrees.
                let au_t = T::of(au);
                let av_t = T::of(av);
                let drx = -sin_t * au_t - cos_t * av_t;
                let dry = cos_t * au_t - sin_t * av_t;
                d_thetas[p] = d_thetas[p] + g * side_t * (dvdx * drx + dvdy * dry);
                if let Some(di) = d_image.as_deref_mut() {
                    let x0 = px.floor();
                    let y0 = py.floor();
                    let fx = T::of(px - x0);
                    let fy = T::of(py - y0);
                    let o = T::one();
                    let corners = [
                        (x0 as isize, y0 as isize, (o - fx) * (o - fy)),
                        (x0 as isize + 1, y0 as isize, fx * (o - fy)),
                        (x0 as isize, y0 as isize + 1, (o - fx) * fy),
                        (x0 as isize + 1, y0 as isize + 1, fx * fy),
                    ];
                    for (xi, yi, wt) in corners {
                        if xi >= 0 && yi >= 0 && xi < w as isize && yi < h as isize {
                            let idx = yi as usize * w + xi as usize;
                            di[idx] = di[idx] + g * wt;
                        }
                    }
                }
            }
        }
    }
}
