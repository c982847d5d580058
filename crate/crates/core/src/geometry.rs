//! Four-point homographies, the DLT solve and stitching-domain canvas extents.
//!
//! Corners are always ordered top-left, top-right, bottom-left, bottom-right,
//! at `(0,0) (w,0) (0,h) (w,h)` in continuous pixel coordinates (pixel `i`
//! covers `[i, i+1)`).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Condition-number ceiling beyond which the DLT system counts as singular.
pub const MAX_DLT_CONDITION: f64 = 1e12;
const INFINITY_EPS: f64 = 1e-12;

/// Displacements `(dx, dy)` of the four image corners, TL, TR, BL, BR.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FourPointOffsets {
    pub offsets: [[f64; 2]; 4],
}

impl FourPointOffsets {
    pub const ZERO: Self = Self { offsets: [[0.0; 2]; 4] };

    pub fn new(offsets: [[f64; 2]; 4]) -> Self {
        Self { offsets }
    }

    /// Same displacement on every corner: a pure translation.
    pub fn uniform(dx: f64, dy: f64) -> Self {
        Self {
            offsets: [[dx, dy]; 4],
        }
    }

    /// `[dx1, dy1, dx2, dy2, ...]` ordering.
    pub fn from_flat(v: [f64; 8]) -> Self {
        let mut offsets = [[0.0; 2]; 4];
        for (k, o) in offsets.iter_mut().enumerate() {
            *o = [v[2 * k], v[2 * k + 1]];
        }
        Self { offsets }
    }

    pub fn to_flat(&self) -> [f64; 8] {
        let mut v = [0.0; 8];
        for (k, o) in self.offsets.iter().enumerate() {
            v[2 * k] = o[0];
            v[2 * k + 1] = o[1];
        }
        v
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::from_flat(self.to_flat().map(|v| v * k))
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Corner positions after displacement.
    pub fn displaced_corners(&self, size: (usize, usize)) -> [(f64, f64); 4] {
        let c = corners(size);
        let mut out = c;
        for k in 0..4 {
            out[k] = (c[k].0 + self.offsets[k][0], c[k].1 + self.offsets[k][1]);
        }
        out
    }
}

pub fn corners((w, h): (usize, usize)) -> [(f64, f64); 4] {
    let (w, h) = (w as f64, h as f64);
    [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
}

/// 3x3 projective transform, normalized so `m[2][2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 9]", into = "[f64; 9]")]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl From<[f64; 9]> for Homography {
    fn from(v: [f64; 9]) -> Self {
        Self {
            m: [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]],
        }
    }
}

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> Self {
        let m = h.m;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }
}

impl Homography {
    pub const IDENTITY: Self = Self {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// `self · other` (apply `other` first).
    pub fn compose(&self, other: &Self) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[r][k] * other.m[k][c]).sum();
            }
        }
        Self { m }.normalized()
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        let scale = self.m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        if !det.is_finite() || det.abs() <= 1e-14 * scale.powi(3).max(1e-300) {
            return Err(Error::SingularHomography);
        }
        let m = &self.m;
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        let mut inv = Self {
            m: adj.map(|row| row.map(|v| v / det)),
        };
        if inv.m[2][2].abs() > 1e-300 {
            inv = inv.normalized();
        }
        Ok(inv)
    }

    fn normalized(self) -> Self {
        let s = self.m[2][2];
        if s == 1.0 || s == 0.0 {
            return self;
        }
        Self {
            m: self.m.map(|row| row.map(|v| v / s)),
        }
    }

    /// Projective application of the matrix to one point.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() <= INFINITY_EPS {
            return Err(Error::PointAtInfinity);
        }
        Ok(((m[0][0] * x + m[0][1] * y + m[0][2]) / w, (m[1][0] * x + m[1][1] * y + m[1][2]) / w))
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }
}

pub fn warp_points(h: &Homography, points: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    points.iter().map(|&(x, y)| h.apply(x, y)).collect()
}

/// Homography together with its derivative with respect to each of the
/// eight offset scalars (flat order `dx1, dy1, ..., dx4, dy4`).
#[derive(Clone, Copy, Debug)]
pub struct DltSolution {
    pub homography: Homography,
    pub jacobian: [[[f64; 3]; 3]; 8],
    pub condition: f64,
}

/// Solve the homography mapping the image corners to corners + offsets.
pub fn solve_dlt(offsets: &FourPointOffsets, image_size: (usize, usize)) -> Result<Homography> {
    Ok(solve_dlt_with_jacobian(offsets, image_size)?.homography)
}

/// DLT solve in coordinates scaled by `1 / max(w, h)`, followed by analytic
/// differentiation of the linear system.
pub fn solve_dlt_with_jacobian(offsets: &FourPointOffsets, image_size: (usize, usize)) -> Result<DltSolution> {
    let (w, h) = image_size;
    if w < 2 || h < 2 {
        return Err(Error::TooSmall(format!("DLT needs an image of at least 2x2, got {w}x{h}")));
    }
    if !offsets.is_finite() {
        return Err(Error::OutOfRange("non-finite corner offsets".into()));
    }
    let s = w.max(h) as f64;
    let src = corners(image_size).map(|(x, y)| (x / s, y / s));
    let dst = offsets.displaced_corners(image_size).map(|(x, y)| (x / s, y / s));

    let mut a = [[0.0; 8]; 8];
    let mut b = [0.0; 8];
    for k in 0..4 {
        let (x, y) = src[k];
        let (u, v) = dst[k];
        a[2 * k] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y];
        b[2 * k] = u;
        a[2 * k + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y];
        b[2 * k + 1] = v;
    }
    let inv = invert8(&a)?;
    let norm_inf = |m: &[[f64; 8]; 8]| m.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let condition = norm_inf(&a) * norm_inf(&inv);
    if !condition.is_finite() || condition > MAX_DLT_CONDITION {
        return Err(Error::DegenerateQuad(condition));
    }
    let hn: [f64; 8] = std::array::from_fn(|i| (0..8).map(|j| inv[i][j] * b[j]).sum());

    let denorm = |p: &[f64; 8], constant: f64| -> [[f64; 3]; 3] {
        [[p[0], p[1], p[2] * s], [p[3], p[4], p[5] * s], [p[6] / s, p[7] / s, constant]]
    };
    // A nonsingular system can still yield a rank-deficient matrix when
    // three displaced corners are collinear.
    let scaled = Homography {
        m: [[hn[0], hn[1], hn[2]], [hn[3], hn[4], hn[5]], [hn[6], hn[7], 1.0]],
    };
    if scaled.determinant().abs() < 1e-10 {
        return Err(Error::DegenerateQuad(f64::INFINITY));
    }
    let homography = Homography { m: denorm(&hn, 1.0) };

    let mut jacobian = [[[0.0; 3]; 3]; 8];
    for (r, jac) in jacobian.iter_mut().enumerate() {
        let (x, y) = src[r / 2];
        // d(row . h)/d(target coord) = 1 + x h7 + y h8, in scaled units.
        let k = (1.0 + x * hn[6] + y * hn[7]) / s;
        let dh: [f64; 8] = std::array::from_fn(|i| inv[i][r] * k);
        *jac = denorm(&dh, 0.0);
    }
    Ok(DltSolution {
        homography,
        jacobian,
        condition,
    })
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert8(a: &[[f64; 8]; 8]) -> Result<[[f64; 8]; 8]> {
    let mut m = *a;
    let mut inv = [[0.0; 8]; 8];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("non-empty range");
        if m[pivot][col].abs() < 1e-300 {
            return Err(Error::DegenerateQuad(f64::INFINITY));
        }
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let p = m[col][col];
        for j in 0..8 {
            m[col][j] /= p;
            inv[col][j] /= p;
        }
        for i in 0..8 {
            if i != col {
                let f = m[i][col];
                if f != 0.0 {
                    for j in 0..8 {
                        m[i][j] -= f * m[col][j];
                        inv[i][j] -= f * inv[col][j];
                    }
                }
            }
        }
    }
    Ok(inv)
}

/// Extent of the stitching domain: the smallest box holding the reference
/// image and the warped target, plus the shift that moves its minimum corner
/// to the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanvasSpec {
    pub width: usize,
    pub height: usize,
    pub origin_shift: (f64, f64),
}

impl CanvasSpec {
    /// The reference frame itself: no enlargement, no shift.
    pub fn frame(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            origin_shift: (0.0, 0.0),
        }
    }
}

pub fn canvas_extent(offsets: &FourPointOffsets, image_size: (usize, usize)) -> Result<CanvasSpec> {
    if !offsets.is_finite() {
        return Err(Error::OutOfRange("non-finite corner offsets".into()));
    }
    let pts = corners(image_size).into_iter().chain(offsets.displaced_corners(image_size));
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    Ok(CanvasSpec {
        width: (x1 - x0).ceil() as usize,
        height: (y1 - y0).ceil() as usize,
        origin_shift: (-x0, -y0),
    })
}
