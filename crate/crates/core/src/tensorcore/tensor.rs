use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Extent of a rank-4 tensor in (batch, channel, height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub const fn with_spatial(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense `f64` tensor, row-major over (n, c, h, w).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(Shape4::scalar(), value)
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// One (n, c) spatial plane.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(other.shape, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Multiply every channel by a single-channel map of the same spatial size.
    pub fn mul_mask(&self, mask: &Self) -> Result<Self> {
        let s = self.shape;
        let m = mask.shape;
        if m.c != 1 || m.n != s.n || m.h != s.h || m.w != s.w {
            return Err(Error::shape(
                "mul_mask",
                format!("mask {m} cannot broadcast over {s}"),
            ));
        }
        let mut out = self.clone();
        for n in 0..s.n {
            let mp = mask.plane(n, 0);
            for c in 0..s.c {
                for (v, &k) in out.plane_mut(n, c).iter_mut().zip(mp) {
                    *v *= k;
                }
            }
        }
        Ok(out)
    }

    /// Stack along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?
            .shape;
        let mut c = 0;
        for p in parts {
            let s = p.shape;
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(Error::shape("concat", format!("{s} vs {first}")));
            }
            c += s.c;
        }
        let shape = first.with_channels(c);
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..first.n {
            for p in parts {
                let per = p.shape.c * p.shape.plane();
                data.extend_from_slice(&p.data[n * per..(n + 1) * per]);
            }
        }
        Ok(Self { shape, data })
    }

    /// Channels `[start, start + count)` as a new tensor.
    pub fn channels(&self, start: usize, count: usize) -> Result<Self> {
        let s = self.shape;
        if start + count > s.c {
            return Err(Error::shape(
                "channels",
                format!("[{start}, {}) out of {} channels", start + count, s.c),
            ));
        }
        let shape = s.with_channels(count);
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..s.n {
            for c in start..start + count {
                data.extend_from_slice(self.plane(n, c));
            }
        }
        Ok(Self { shape, data })
    }

    /// ITU-R BT.601 luma of a 3-channel image; 1-channel input is returned as is.
    pub fn to_luma(&self) -> Result<Self> {
        let s = self.shape;
        match s.c {
            1 => Ok(self.clone()),
            3 => {
                let shape = s.with_channels(1);
                let mut out = Self::zeros(shape);
                for n in 0..s.n {
                    let (r, g, b) = (self.plane(n, 0), self.plane(n, 1), self.plane(n, 2));
                    for (i, v) in out.plane_mut(n, 0).iter_mut().enumerate() {
                        *v = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
                    }
                }
                Ok(out)
            }
            c => Err(Error::shape("to_luma", format!("{c} channels"))),
        }
    }

    pub(crate) fn expect_shape(&self, shape: Shape4, node: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(node, format!("expected {shape}, got {}", self.shape)));
        }
        Ok(())
    }
}
