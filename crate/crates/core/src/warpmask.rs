//! Stitching-domain warping and the content/seam masks built on it.
//!
//! Output pixel `(x, y)` has centre `(x + 0.5, y + 0.5)` on the canvas. It is
//! pulled back through the origin shift and `H^-1` into the source image and
//! sampled bilinearly; taps outside the source read as zero.

use std::path::Path;

use crate::geometry::{CanvasSpec, Homography};
use crate::tensorcore::{Shape4, Tensor4};
use crate::{datakit, Error, Result};

/// Source-image sample position (index coordinates) for every canvas pixel,
/// or `None` when the pixel maps to the line at infinity.
pub(crate) struct SampleGrid {
    pub width: usize,
    pub height: usize,
    pub coords: Vec<Option<(f64, f64)>>,
}

impl SampleGrid {
    pub fn new(h: &Homography, canvas: &CanvasSpec) -> Result<Self> {
        if !h.is_finite() {
            return Err(Error::SingularHomography);
        }
        let inv = h.inverse()?;
        let (tx, ty) = canvas.origin_shift;
        let mut coords = Vec::with_capacity(canvas.width * canvas.height);
        for y in 0..canvas.height {
            for x in 0..canvas.width {
                let p = (x as f64 + 0.5 - tx, y as f64 + 0.5 - ty);
                coords.push(inv.apply(p.0, p.1).ok().map(|(u, v)| (u - 0.5, v - 0.5)));
            }
        }
        Ok(Self {
            width: canvas.width,
            height: canvas.height,
            coords,
        })
    }
}

/// Bilinear tap positions and weights for one sample.
#[derive(Clone, Copy)]
struct Taps {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

impl Taps {
    #[inline]
    fn new(u: f64, v: f64) -> Option<Self> {
        // Far outside: every tap misses.
        if !(u > -1.0 && v > -1.0 && u < 1e9 && v < 1e9) {
            return None;
        }
        let (xf, yf) = (u.floor(), v.floor());
        Some(Self {
            x0: xf as isize,
            y0: yf as isize,
            fx: u - xf,
            fy: v - yf,
        })
    }

    #[inline]
    fn fetch(plane: &[f64], w: usize, h: usize, x: isize, y: isize) -> f64 {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            plane[y as usize * w + x as usize]
        } else {
            0.0
        }
    }

    #[inline]
    fn corners(&self, plane: &[f64], w: usize, h: usize) -> [f64; 4] {
        [
            Self::fetch(plane, w, h, self.x0, self.y0),
            Self::fetch(plane, w, h, self.x0 + 1, self.y0),
            Self::fetch(plane, w, h, self.x0, self.y0 + 1),
            Self::fetch(plane, w, h, self.x0 + 1, self.y0 + 1),
        ]
    }

    #[inline]
    fn interpolate(&self, [a, b, c, d]: [f64; 4]) -> f64 {
        let top = a + self.fx * (b - a);
        let bot = c + self.fx * (d - c);
        top + self.fy * (bot - top)
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    }
}

/// Bilinear sample of one plane at index coordinates `(u, v)`, zero outside.
#[inline]
pub fn bilinear_sample(plane: &[f64], w: usize, h: usize, u: f64, v: f64) -> f64 {
    Taps::new(u, v).map_or(0.0, |t| t.interpolate(t.corners(plane, w, h)))
}

/// Sample plus its partial derivatives with respect to `u` and `v`.
#[inline]
pub fn bilinear_sample_grad(plane: &[f64], w: usize, h: usize, u: f64, v: f64) -> (f64, f64, f64) {
    match Taps::new(u, v) {
        None => (0.0, 0.0, 0.0),
        Some(t) => {
            let [a, b, c, d] = t.corners(plane, w, h);
            let top = a + t.fx * (b - a);
            let bot = c + t.fx * (d - c);
            let val = top + t.fy * (bot - top);
            let du = (1.0 - t.fy) * (b - a) + t.fy * (d - c);
            let dv = bot - top;
            (val, du, dv)
        }
    }
}

/// Warp an image onto the canvas through `h`.
pub fn warp_image(image: &Tensor4, h: &Homography, canvas: &CanvasSpec) -> Result<Tensor4> {
    if !image.all_finite() {
        return Err(Error::NonFinite("warp_image input".into()));
    }
    let grid = SampleGrid::new(h, canvas)?;
    Ok(warp_with_grid(image, &grid))
}

pub(crate) fn warp_with_grid(image: &Tensor4, grid: &SampleGrid) -> Tensor4 {
    let s = image.shape();
    let taps: Vec<Option<Taps>> = grid
        .coords
        .iter()
        .map(|c| c.and_then(|(u, v)| Taps::new(u, v)))
        .collect();
    let mut out = Tensor4::zeros(s.with_spatial(grid.height, grid.width));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = image.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (o, t) in dst.iter_mut().zip(&taps) {
                if let Some(t) = t {
                    *o = t.interpolate(t.corners(src, s.w, s.h));
                }
            }
        }
    }
    out
}

/// Adjoint of [`warp_image`] with respect to the image: scatters canvas
/// gradients back onto the source pixels.
pub fn warp_image_backward(grad_out: &Tensor4, h: &Homography, canvas: &CanvasSpec, in_shape: Shape4) -> Result<Tensor4> {
    let grid = SampleGrid::new(h, canvas)?;
    let g = grad_out.shape();
    if g.h != canvas.height || g.w != canvas.width || g.c != in_shape.c || g.n != in_shape.n {
        return Err(Error::shape(
            "warp_image_backward",
            format!("gradient {g} does not match canvas {}x{} / input {in_shape}", canvas.height, canvas.width),
        ));
    }
    let (w, hgt) = (in_shape.w as isize, in_shape.h as isize);
    let mut gx = Tensor4::zeros(in_shape);
    for n in 0..g.n {
        for c in 0..g.c {
            let go = grad_out.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for (i, coord) in grid.coords.iter().enumerate() {
                let Some(t) = coord.and_then(|(u, v)| Taps::new(u, v)) else { continue };
                let wts = t.weights();
                let pos = [(t.x0, t.y0), (t.x0 + 1, t.y0), (t.x0, t.y0 + 1), (t.x0 + 1, t.y0 + 1)];
                for ((x, y), wt) in pos.into_iter().zip(wts) {
                    if x >= 0 && y >= 0 && x < w && y < hgt {
                        dst[y as usize * in_shape.w + x as usize] += wt * go[i];
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Warp of the all-one image: the footprint of an image of `image_size` on the canvas.
pub fn content_mask(h: &Homography, canvas: &CanvasSpec, image_size: (usize, usize)) -> Result<Tensor4> {
    let ones = Tensor4::filled(Shape4::new(1, 1, image_size.1, image_size.0), 1.0);
    warp_image(&ones, h, canvas)
}

fn expect_mask(m: &Tensor4, what: &str) -> Result<()> {
    let s = m.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape(what, format!("expected a 1x1xHxW mask, got {s}")));
    }
    Ok(())
}

/// `|M(i,j) - M(i-1,j)| + |M(i,j) - M(i,j-1)|`, with neighbours outside the
/// canvas read as zero (so a mask touching the top or left border has a
/// nonzero gradient there).
pub fn mask_gradient(m: &Tensor4) -> Result<Tensor4> {
    expect_mask(m, "mask_gradient")?;
    let s = m.shape();
    let p = m.plane(0, 0);
    let mut out = Tensor4::zeros(s);
    let o = out.plane_mut(0, 0);
    for i in 0..s.h {
        for j in 0..s.w {
            let v = p[i * s.w + j];
            let up = if i > 0 { p[(i - 1) * s.w + j] } else { 0.0 };
            let left = if j > 0 { p[i * s.w + j - 1] } else { 0.0 };
            o[i * s.w + j] = (v - up).abs() + (v - left).abs();
        }
    }
    Ok(out)
}

/// Unnormalized 3x3 all-one convolution, zero padded.
fn box3(p: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    let (y, x) = (i as isize + di, j as isize + dj);
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        acc += p[y as usize * w + x as usize];
                    }
                }
            }
            out[i * w + j] = acc;
        }
    }
    out
}

/// Seam band of one image: the other image's mask edge, dilated three
/// times, clipped to [0,1], restricted to this image's own content.
fn seam_for(own: &Tensor4, other: &Tensor4) -> Result<Tensor4> {
    let s = own.shape();
    let grad = mask_gradient(other)?;
    let mut band = grad.plane(0, 0).to_vec();
    for _ in 0..3 {
        band = box3(&band, s.w, s.h);
    }
    let data = band
        .iter()
        .zip(own.plane(0, 0))
        .map(|(b, m)| b.clamp(0.0, 1.0) * m)
        .collect();
    Tensor4::from_vec(s, data)
}

pub fn seam_masks(content_a: &Tensor4, content_b: &Tensor4) -> Result<(Tensor4, Tensor4)> {
    expect_mask(content_a, "seam_masks")?;
    expect_mask(content_b, "seam_masks")?;
    if content_a.shape() != content_b.shape() {
        return Err(Error::shape(
            "seam_masks",
            format!("{} vs {}", content_a.shape(), content_b.shape()),
        ));
    }
    Ok((seam_for(content_a, content_b)?, seam_for(content_b, content_a)?))
}

/// Overlap area as a fraction of image A's area.
pub fn overlap_rate(content_a: &Tensor4, content_b: &Tensor4) -> Result<f64> {
    expect_mask(content_a, "overlap_rate")?;
    if content_a.shape() != content_b.shape() {
        return Err(Error::shape("overlap_rate", "mask shapes differ"));
    }
    let area = content_a.sum();
    if area <= 0.0 {
        return Err(Error::DegenerateOverlap("content mask A is empty".into()));
    }
    let inter: f64 = content_a.data().iter().zip(content_b.data()).map(|(a, b)| a * b).sum();
    Ok(inter / area)
}

/// Content and seam masks for one aligned pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub content_a: Tensor4,
    pub content_b: Tensor4,
    pub seam_a: Tensor4,
    pub seam_b: Tensor4,
}

impl MaskSet {
    pub fn from_content(content_a: Tensor4, content_b: Tensor4) -> Result<Self> {
        let (seam_a, seam_b) = seam_masks(&content_a, &content_b)?;
        Ok(Self {
            content_a,
            content_b,
            seam_a,
            seam_b,
        })
    }

    pub fn overlap_rate(&self) -> Result<f64> {
        overlap_rate(&self.content_a, &self.content_b)
    }

    /// Bilinear resize of every mask, re-clipped to [0,1].
    pub fn resized(&self, h: usize, w: usize) -> Self {
        let r = |m: &Tensor4| crate::tensorcore::kernels::resize_bilinear(m, h, w).clamp01();
        Self {
            content_a: r(&self.content_a),
            content_b: r(&self.content_b),
            seam_a: r(&self.seam_a),
            seam_b: r(&self.seam_b),
        }
    }
}

/// Write a mask as 8-bit grayscale (value x 255, ties to even).
pub fn save_mask_png(mask: &Tensor4, path: &Path) -> Result<()> {
    expect_mask(mask, "save_mask_png")?;
    datakit::save_image(mask, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{canvas_extent, solve_dlt, FourPointOffsets};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(Shape4::new(1, c, h, w), |_, _, _, _| rng.random_range(0.0..1.0))
    }

    fn mask(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor4 {
        Tensor4::from_fn(Shape4::new(1, 1, h, w), |_, _, y, x| f(y, x))
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = random_image(3, 17, 23, 1);
        let out = warp_image(&img, &Homography::IDENTITY, &CanvasSpec::frame(23, 17)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn integer_translation_is_pixel_exact() {
        let img = random_image(2, 12, 10, 2);
        let off = FourPointOffsets::uniform(7.0, 3.0);
        let h = solve_dlt(&off, (10, 12)).unwrap();
        let canvas = canvas_extent(&off, (10, 12)).unwrap();
        assert_eq!((canvas.width, canvas.height), (17, 15));
        let out = warp_image(&img, &Homography::translation(7.0, 3.0), &canvas).unwrap();
        let via_dlt = warp_image(&img, &h, &canvas).unwrap();
        for c in 0..2 {
            for y in 0..15 {
                for x in 0..17 {
                    let expected = if (3..15).contains(&y) && (7..17).contains(&x) {
                        img.get(0, c, y - 3, x - 7)
                    } else {
                        0.0
                    };
                    assert_eq!(out.get(0, c, y, x), expected);
                    assert!((via_dlt.get(0, c, y, x) - expected).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn half_pixel_shift_averages_neighbours() {
        let (a, b) = (0.25, 0.875);
        let img = Tensor4::from_vec(Shape4::new(1, 1, 1, 2), vec![a, b]).unwrap();
        let canvas = canvas_extent(&FourPointOffsets::uniform(0.5, 0.0), (2, 1)).unwrap();
        let out = warp_image(&img, &Homography::translation(0.5, 0.0), &canvas).unwrap();
        assert!((out.get(0, 0, 0, 1) - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn warp_is_linear() {
        let off = FourPointOffsets::from_flat([3.2, -1.5, -4.0, 2.0, 1.0, 5.5, -2.5, -3.0]);
        let h = solve_dlt(&off, (20, 16)).unwrap();
        let canvas = canvas_extent(&off, (20, 16)).unwrap();
        let i1 = random_image(2, 16, 20, 3);
        let i2 = random_image(2, 16, 20, 4);
        let combo = i1.zip_map(&i2, |p, q| 0.7 * p - 1.3 * q).unwrap();
        let lhs = warp_image(&combo, &h, &canvas).unwrap();
        let w1 = warp_image(&i1, &h, &canvas).unwrap();
        let w2 = warp_image(&i2, &h, &canvas).unwrap();
        let rhs = w1.zip_map(&w2, |p, q| 0.7 * p - 1.3 * q).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let off = FourPointOffsets::from_flat([2.0, 1.0, -3.0, 0.5, 1.5, -2.0, 0.0, 3.0]);
        let h = solve_dlt(&off, (9, 7)).unwrap();
        let canvas = canvas_extent(&off, (9, 7)).unwrap();
        let x = random_image(1, 7, 9, 5);
        let y = random_image(1, canvas.height, canvas.width, 6);
        let wx = warp_image(&x, &h, &canvas).unwrap();
        let wty = warp_image_backward(&y, &h, &canvas, x.shape()).unwrap();
        let lhs: f64 = wx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(wty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sample_grad_matches_finite_differences() {
        let img = random_image(1, 6, 6, 7);
        let (u, v) = (2.3, 3.6);
        let (_, du, dv) = bilinear_sample_grad(img.data(), 6, 6, u, v);
        let e = 1e-6;
        let fu = (bilinear_sample(img.data(), 6, 6, u + e, v) - bilinear_sample(img.data(), 6, 6, u - e, v)) / (2.0 * e);
        let fv = (bilinear_sample(img.data(), 6, 6, u, v + e) - bilinear_sample(img.data(), 6, 6, u, v - e)) / (2.0 * e);
        assert!((du - fu).abs() < 1e-8 && (dv - fv).abs() < 1e-8);
    }

    #[test]
    fn content_mask_examples() {
        let m = content_mask(&Homography::IDENTITY, &CanvasSpec::frame(8, 6), (8, 6)).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));

        let off = FourPointOffsets::uniform(8.0, 0.0);
        let canvas = canvas_extent(&off, (8, 6)).unwrap();
        let b = content_mask(&solve_dlt(&off, (8, 6)).unwrap(), &canvas, (8, 6)).unwrap();
        let a = content_mask(&Homography::IDENTITY, &canvas, (8, 6)).unwrap();
        assert_eq!(overlap_rate(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn mask_gradient_examples() {
        let z = mask(5, 5, |_, _| 0.0);
        assert!(mask_gradient(&z).unwrap().data().iter().all(|&v| v == 0.0));

        let ones = mask(5, 5, |_, _| 1.0);
        let g = mask_gradient(&ones).unwrap();
        assert_eq!(g.get(0, 0, 2, 3), 0.0);
        assert_eq!(g.get(0, 0, 0, 0), 2.0);
        assert_eq!(g.get(0, 0, 0, 3), 1.0);
        assert_eq!(g.get(0, 0, 3, 0), 1.0);

        let half = mask(8, 8, |_, x| if x < 4 { 1.0 } else { 0.0 });
        let g = mask_gradient(&half).unwrap();
        for y in 1..8 {
            for x in 1..8 {
                let expected = if x == 4 { 1.0 } else { 0.0 };
                assert_eq!(g.get(0, 0, y, x), expected, "({y},{x})");
            }
        }
    }

    #[test]
    fn seam_of_disjoint_support_is_zero() {
        // B covers the whole canvas; its only edges are the top/left border.
        // A lives far away from that border band.
        let b = mask(16, 16, |_, _| 1.0);
        let a = mask(16, 16, |y, x| if y >= 8 && x >= 8 { 1.0 } else { 0.0 });
        let (seam_a, _) = seam_masks(&a, &b).unwrap();
        assert!(seam_a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_plane_seam_is_seven_wide() {
        // A: left 12 columns, B: right 12 columns of a 16-wide canvas.
        let a = mask(16, 16, |_, x| if x < 12 { 1.0 } else { 0.0 });
        let b = mask(16, 16, |_, x| if x >= 4 { 1.0 } else { 0.0 });
        let (seam_a, _) = seam_masks(&a, &b).unwrap();
        // B's interior edge sits at column 4; away from the top border the
        // band covers columns 1..=7.
        for x in 0..16 {
            let expected = if (1..=7).contains(&x) { 1.0 } else { 0.0 };
            assert_eq!(seam_a.get(0, 0, 10, x), expected, "column {x}");
        }
    }

    #[test]
    fn overlap_rate_examples() {
        let a = mask(10, 20, |_, x| if x < 10 { 1.0 } else { 0.0 });
        assert_eq!(overlap_rate(&a, &a).unwrap(), 1.0);
        let b = mask(10, 20, |_, x| if x >= 10 { 1.0 } else { 0.0 });
        assert_eq!(overlap_rate(&a, &b).unwrap(), 0.0);
        let c = mask(10, 20, |_, x| if (5..15).contains(&x) { 1.0 } else { 0.0 });
        assert!((overlap_rate(&a, &c).unwrap() - 0.5).abs() <= 1.0 / 20.0);
        assert!(overlap_rate(&mask(3, 3, |_, _| 0.0), &a.clone()).is_err());
    }
}
