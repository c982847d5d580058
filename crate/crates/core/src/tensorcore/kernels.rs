//! Forward and backward kernels for the layer catalog.
//!
//! All accumulation runs in a fixed sequential order so results are
//! bit-reproducible.

use super::{Shape4, Tensor4};

/// Output rows/cols `[lo, hi)` for which `i + d` stays inside `[0, len)`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// 3x3 convolution, stride 1, zero padding 1.
/// `weight` is (out, in, 3, 3), `bias` is (1, out, 1, 1).
pub fn conv3x3_forward(x: &Tensor4, weight: &Tensor4, bias: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let co_n = weight.shape().n;
    let (h, w) = (s.h, s.w);
    let mut y = Tensor4::zeros(Shape4::new(s.n, co_n, h, w));
    for n in 0..s.n {
        for co in 0..co_n {
            let b = bias.data()[co];
            let mut out = vec![b; h * w];
            for ci in 0..s.c {
                let inp = x.plane(n, ci);
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid_range(w, dx);
                        let k = weight.get(co, ci, ky, kx);
                        if k == 0.0 {
                            continue;
                        }
                        for r in y0..y1 {
                            let src_row = (r as isize + dy) as usize * w;
                            let o = &mut out[r * w + x0..r * w + x1];
                            let i = &inp[(src_row as isize + x0 as isize + dx) as usize
                                ..(src_row as isize + x1 as isize + dx) as usize];
                            for (ov, iv) in o.iter_mut().zip(i) {
                                *ov += k * iv;
                            }
                        }
                    }
                }
            }
            y.plane_mut(n, co).copy_from_slice(&out);
        }
    }
    y
}

pub struct ConvGrads {
    pub input: Tensor4,
    pub weight: Tensor4,
    pub bias: Tensor4,
}

pub fn conv3x3_backward(x: &Tensor4, weight: &Tensor4, grad_out: &Tensor4, need_params: bool) -> ConvGrads {
    let s = x.shape();
    let co_n = weight.shape().n;
    let (h, w) = (s.h, s.w);
    let mut gx = Tensor4::zeros(s);
    let mut gw = Tensor4::zeros(weight.shape());
    let mut gb = Tensor4::zeros(Shape4::new(1, co_n, 1, 1));
    for n in 0..s.n {
        for co in 0..co_n {
            let go = grad_out.plane(n, co);
            if need_params {
                gb.data_mut()[co] += go.iter().sum::<f64>();
            }
            for ci in 0..s.c {
                let inp = x.plane(n, ci);
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid_range(w, dx);
                        let k = weight.get(co, ci, ky, kx);
                        let mut acc = 0.0;
                        let gxp = gx.plane_mut(n, ci);
                        for r in y0..y1 {
                            let src = ((r as isize + dy) as usize * w) as isize + dx;
                            let g = &go[r * w + x0..r * w + x1];
                            let lo = (src + x0 as isize) as usize;
                            let hi = (src + x1 as isize) as usize;
                            if need_params {
                                acc += g.iter().zip(&inp[lo..hi]).map(|(a, b)| a * b).sum::<f64>();
                            }
                            for (dst, gv) in gxp[lo..hi].iter_mut().zip(g) {
                                *dst += k * gv;
                            }
                        }
                        if need_params {
                            let i = gw.index(co, ci, ky, kx);
                            gw.data_mut()[i] += acc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// 2x2 transposed convolution with stride 2: doubles each spatial dim.
/// `weight` is (out, in, 2, 2), `bias` is (1, out, 1, 1).
pub fn deconv2x2_forward(x: &Tensor4, weight: &Tensor4, bias: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let co_n = weight.shape().n;
    let (oh, ow) = (s.h * 2, s.w * 2);
    let mut y = Tensor4::zeros(Shape4::new(s.n, co_n, oh, ow));
    for n in 0..s.n {
        for co in 0..co_n {
            let b = bias.data()[co];
            let out = y.plane_mut(n, co);
            out.iter_mut().for_each(|v| *v = b);
            for ci in 0..s.c {
                let inp = x.plane(n, ci);
                let k = [
                    weight.get(co, ci, 0, 0),
                    weight.get(co, ci, 0, 1),
                    weight.get(co, ci, 1, 0),
                    weight.get(co, ci, 1, 1),
                ];
                for r in 0..s.h {
                    for c in 0..s.w {
                        let v = inp[r * s.w + c];
                        let base = 2 * r * ow + 2 * c;
                        out[base] += k[0] * v;
                        out[base + 1] += k[1] * v;
                        out[base + ow] += k[2] * v;
                        out[base + ow + 1] += k[3] * v;
                    }
                }
            }
        }
    }
    y
}

pub fn deconv2x2_backward(x: &Tensor4, weight: &Tensor4, grad_out: &Tensor4, need_params: bool) -> ConvGrads {
    let s = x.shape();
    let co_n = weight.shape().n;
    let ow = s.w * 2;
    let mut gx = Tensor4::zeros(s);
    let mut gw = Tensor4::zeros(weight.shape());
    let mut gb = Tensor4::zeros(Shape4::new(1, co_n, 1, 1));
    for n in 0..s.n {
        for co in 0..co_n {
            let go = grad_out.plane(n, co);
            if need_params {
                gb.data_mut()[co] += go.iter().sum::<f64>();
            }
            for ci in 0..s.c {
                let inp = x.plane(n, ci);
                let k = [
                    weight.get(co, ci, 0, 0),
                    weight.get(co, ci, 0, 1),
                    weight.get(co, ci, 1, 0),
                    weight.get(co, ci, 1, 1),
                ];
                let mut acc = [0.0; 4];
                let gxp = gx.plane_mut(n, ci);
                for r in 0..s.h {
                    for c in 0..s.w {
                        let base = 2 * r * ow + 2 * c;
                        let g = [go[base], go[base + 1], go[base + ow], go[base + ow + 1]];
                        gxp[r * s.w + c] += k[0] * g[0] + k[1] * g[1] + k[2] * g[2] + k[3] * g[3];
                        if need_params {
                            let v = inp[r * s.w + c];
                            for (a, gv) in acc.iter_mut().zip(g) {
                                *a += v * gv;
                            }
                        }
                    }
                }
                if need_params {
                    for (q, a) in acc.iter().enumerate() {
                        let i = gw.index(co, ci, q / 2, q % 2);
                        gw.data_mut()[i] += a;
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// 2x2 max pooling, stride 2. Odd trailing rows/cols are dropped.
/// Ties resolve to the first element in row-major window order.
pub fn maxpool2x2_forward(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut y = Tensor4::zeros(s.with_spatial(oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let inp = x.plane(n, c);
            let out = y.plane_mut(n, c);
            for r in 0..oh {
                for q in 0..ow {
                    let (_, v) = window_argmax(inp, s.w, r, q);
                    out[r * ow + q] = v;
                }
            }
        }
    }
    y
}

#[inline]
fn window_argmax(plane: &[f64], w: usize, r: usize, q: usize) -> (usize, f64) {
    let i0 = 2 * r * w + 2 * q;
    let mut best = (i0, plane[i0]);
    for i in [i0 + 1, i0 + w, i0 + w + 1] {
        if plane[i] > best.1 {
            best = (i, plane[i]);
        }
    }
    best
}

pub fn maxpool2x2_backward(x: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut gx = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let inp = x.plane(n, c);
            let go = grad_out.plane(n, c);
            let gxp = gx.plane_mut(n, c);
            for r in 0..oh {
                for q in 0..ow {
                    let (i, _) = window_argmax(inp, s.w, r, q);
                    gxp[i] += go[r * ow + q];
                }
            }
        }
    }
    gx
}

/// Sampling table for one axis of a half-pixel-centred bilinear resize with
/// clamp-to-edge.
struct Axis {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Axis {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for o in 0..dst {
            let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i = p.floor() as usize;
            lo.push(i);
            hi.push((i + 1).min(src - 1));
            frac.push(p - i as f64);
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resize with half-pixel centres; at equal size this is the identity.
pub fn resize_bilinear(x: &Tensor4, oh: usize, ow: usize) -> Tensor4 {
    let s = x.shape();
    if (oh, ow) == (s.h, s.w) {
        return x.clone();
    }
    let ay = Axis::new(s.h, oh);
    let ax = Axis::new(s.w, ow);
    let mut y = Tensor4::zeros(s.with_spatial(oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let inp = x.plane(n, c);
            let out = y.plane_mut(n, c);
            for r in 0..oh {
                let (r0, r1, fy) = (ay.lo[r] * s.w, ay.hi[r] * s.w, ay.frac[r]);
                for q in 0..ow {
                    let (c0, c1, fx) = (ax.lo[q], ax.hi[q], ax.frac[q]);
                    let top = (1.0 - fx) * inp[r0 + c0] + fx * inp[r0 + c1];
                    let bot = (1.0 - fx) * inp[r1 + c0] + fx * inp[r1 + c1];
                    out[r * ow + q] = (1.0 - fy) * top + fy * bot;
                }
            }
        }
    }
    y
}

/// Adjoint of [`resize_bilinear`] with respect to its input.
pub fn resize_bilinear_backward(grad_out: &Tensor4, in_shape: Shape4) -> Tensor4 {
    let g = grad_out.shape();
    if (g.h, g.w) == (in_shape.h, in_shape.w) {
        return grad_out.clone();
    }
    let ay = Axis::new(in_shape.h, g.h);
    let ax = Axis::new(in_shape.w, g.w);
    let mut gx = Tensor4::zeros(in_shape);
    let w = in_shape.w;
    for n in 0..g.n {
        for c in 0..g.c {
            let go = grad_out.plane(n, c);
            let gxp = gx.plane_mut(n, c);
            for r in 0..g.h {
                let (r0, r1, fy) = (ay.lo[r] * w, ay.hi[r] * w, ay.frac[r]);
                for q in 0..g.w {
                    let (c0, c1, fx) = (ax.lo[q], ax.hi[q], ax.frac[q]);
                    let v = go[r * g.w + q];
                    gxp[r0 + c0] += (1.0 - fy) * (1.0 - fx) * v;
                    gxp[r0 + c1] += (1.0 - fy) * fx * v;
                    gxp[r1 + c0] += fy * (1.0 - fx) * v;
                    gxp[r1 + c1] += fy * fx * v;
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape4, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// Textbook nested-loop convolution, zero padded.
    fn naive_conv(x: &Tensor4, w: &Tensor4, b: &Tensor4) -> Tensor4 {
        let s = x.shape();
        let co_n = w.shape().n;
        Tensor4::from_fn(Shape4::new(s.n, co_n, s.h, s.w), |n, co, r, q| {
            let mut acc = b.data()[co];
            for ci in 0..s.c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (yy, xx) = (r as isize + ky as isize - 1, q as isize + kx as isize - 1);
                        if yy >= 0 && xx >= 0 && (yy as usize) < s.h && (xx as usize) < s.w {
                            acc += w.get(co, ci, ky, kx) * x.get(n, ci, yy as usize, xx as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn naive_deconv(x: &Tensor4, w: &Tensor4, b: &Tensor4) -> Tensor4 {
        let s = x.shape();
        let co_n = w.shape().n;
        Tensor4::from_fn(Shape4::new(s.n, co_n, 2 * s.h, 2 * s.w), |n, co, r, q| {
            let mut acc = b.data()[co];
            for ci in 0..s.c {
                acc += w.get(co, ci, r % 2, q % 2) * x.get(n, ci, r / 2, q / 2);
            }
            acc
        })
    }

    fn max_diff(a: &Tensor4, b: &Tensor4) -> f64 {
        a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn conv_matches_naive_loop() {
        let x = random(Shape4::new(2, 3, 8, 8), 1);
        let w = random(Shape4::new(4, 3, 3, 3), 2);
        let b = random(Shape4::new(1, 4, 1, 1), 3);
        assert!(max_diff(&conv3x3_forward(&x, &w, &b), &naive_conv(&x, &w, &b)) < 1e-12);
    }

    #[test]
    fn deconv_matches_naive_loop() {
        let x = random(Shape4::new(1, 3, 8, 8), 4);
        let w = random(Shape4::new(2, 3, 2, 2), 5);
        let b = random(Shape4::new(1, 2, 1, 1), 6);
        assert!(max_diff(&deconv2x2_forward(&x, &w, &b), &naive_deconv(&x, &w, &b)) < 1e-12);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = random(Shape4::new(1, 1, 5, 7), 7);
        let mut w = Tensor4::zeros(Shape4::new(1, 1, 3, 3));
        w.set(0, 0, 1, 1, 1.0);
        let b = Tensor4::zeros(Shape4::new(1, 1, 1, 1));
        assert_eq!(conv3x3_forward(&x, &w, &b), x);
    }

    #[test]
    fn maxpool_halves_and_picks_max() {
        let x = Tensor4::from_vec(
            Shape4::new(1, 1, 2, 4),
            vec![1.0, 5.0, -1.0, -2.0, 3.0, 2.0, -3.0, -0.5],
        )
        .unwrap();
        let y = maxpool2x2_forward(&x);
        assert_eq!(y.data(), &[5.0, -0.5]);
        let g = maxpool2x2_backward(&x, &Tensor4::filled(y.shape(), 1.0));
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn resize_identity_and_constant_roundtrip() {
        let x = random(Shape4::new(1, 2, 9, 13), 8);
        assert_eq!(resize_bilinear(&x, 9, 13), x);
        let c = Tensor4::filled(Shape4::new(1, 1, 16, 24), 0.37);
        let back = resize_bilinear(&resize_bilinear(&c, 5, 7), 16, 24);
        assert!(back.data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn resize_backward_is_adjoint() {
        // <R x, y> == <x, R^T y>
        let x = random(Shape4::new(1, 1, 11, 6), 9);
        let y = random(Shape4::new(1, 1, 4, 9), 10);
        let rx = resize_bilinear(&x, 4, 9);
        let rty = resize_bilinear_backward(&y, x.shape());
        let lhs: f64 = rx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(rty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
