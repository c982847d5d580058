//! Coarse-to-fine direct estimation of the four corner offsets that align a
//! target image to a reference under the ablation-masked L1 objective.

use serde::{Deserialize, Serialize};

use crate::geometry::{canvas_extent, solve_dlt, solve_dlt_with_jacobian, CanvasSpec, FourPointOffsets, Homography};
use crate::losses::ablation_loss;
use crate::tensorcore::{kernels, Tensor4};
use crate::warpmask::{bilinear_sample_grad, content_mask, warp_image, MaskSet};
use crate::{Error, Result};

/// Steps that would leave less than this fraction of the reference covered
/// are rejected.
pub const MIN_OVERLAP: f64 = 0.1;
const PLATEAU_TOL: f64 = 1e-4;
const PLATEAU_ITERS: usize = 10;
const MIN_STEP: f64 = 1e-3;
const MIN_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    pub levels: usize,
    pub iterations_per_level: usize,
    /// Initial step length in pixels of the current level.
    pub step_init: f64,
    /// Step multiplier on a rejected step or a plateau.
    pub step_decay: f64,
    /// Per-scalar bound on the offsets at full resolution; `None` means
    /// 0.45 x image width.
    pub max_offset: Option<f64>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations_per_level: 200,
            step_init: 1.0,
            step_decay: 0.5,
            max_offset: None,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("pyramid: {m}")));
        if self.levels == 0 {
            return bad("levels must be at least 1");
        }
        if self.iterations_per_level == 0 {
            return bad("iterations_per_level must be positive");
        }
        if !(self.step_init > 0.0 && self.step_init.is_finite()) {
            return bad("step_init must be positive");
        }
        if !(self.step_decay > 0.0 && self.step_decay < 1.0) {
            return bad("step_decay must lie in (0, 1)");
        }
        if let Some(m) = self.max_offset {
            if !(m > 0.0 && m.is_finite()) {
                return bad("max_offset must be positive");
            }
        }
        Ok(())
    }

    fn check_image(&self, w: usize, h: usize) -> Result<()> {
        let min = w.min(h);
        if min < MIN_SIZE {
            return Err(Error::TooSmall(format!("alignment needs at least {MIN_SIZE}x{MIN_SIZE}, got {w}x{h}")));
        }
        let max_levels = (min as f64).log2().floor() as usize - 2;
        if self.levels > max_levels {
            return Err(Error::Config(format!(
                "{} pyramid levels requested but a {w}x{h} image supports at most {max_levels}",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Accepted losses of one pyramid level, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    pub offsets: FourPointOffsets,
    pub trace: Vec<LevelTrace>,
    /// Full-resolution loss at the returned offsets.
    pub final_loss: f64,
    pub identity_loss: f64,
}

struct Level {
    w: usize,
    h: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    ones: Vec<f64>,
}

struct Eval {
    loss: f64,
    coverage: f64,
    grad: [f64; 8],
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

impl Level {
    fn new(a: &Tensor4, b: &Tensor4, h: usize, w: usize) -> Self {
        let a = kernels::resize_bilinear(a, h, w);
        let b = kernels::resize_bilinear(b, h, w);
        Self {
            w,
            h,
            a: a.into_vec(),
            b: b.into_vec(),
            ones: vec![1.0; w * h],
        }
    }

    /// Masked L1 `sum |M a - W(b)| / sum M` over the reference frame, and
    /// optionally its gradient in the eight offsets.
    fn eval(&self, off: &FourPointOffsets, with_grad: bool) -> Result<Eval> {
        let (w, h) = (self.w, self.h);
        let sol = solve_dlt_with_jacobian(off, (w, h))?;
        let inv = sol.homography.inverse()?.m;
        // `inv` is lambda H^-1 (normalized). d(H^-1)/dθ = -H^-1 (dH/dθ) H^-1,
        // so with q = inv p the change of q is -(inv dH q) / lambda.
        let lambda = matmul(&sol.homography.m, &inv)[2][2];
        let k: [[[f64; 3]; 3]; 8] =
            std::array::from_fn(|i| matmul(&inv, &sol.jacobian[i]).map(|r| r.map(|v| v / lambda)));
        let (mut num, mut den) = (0.0, 0.0);
        let (mut dnum, mut dden) = ([0.0; 8], [0.0; 8]);
        for y in 0..h {
            let py = y as f64 + 0.5;
            for x in 0..w {
                let px = x as f64 + 0.5;
                let q = [
                    inv[0][0] * px + inv[0][1] * py + inv[0][2],
                    inv[1][0] * px + inv[1][1] * py + inv[1][2],
                    inv[2][0] * px + inv[2][1] * py + inv[2][2],
                ];
                if q[2].abs() <= 1e-12 {
                    continue;
                }
                let (u, v) = (q[0] / q[2], q[1] / q[2]);
                let (m, mu, mv) = bilinear_sample_grad(&self.ones, w, h, u - 0.5, v - 0.5);
                if m == 0.0 && mu == 0.0 && mv == 0.0 {
                    continue;
                }
                let (bw, bu, bv) = bilinear_sample_grad(&self.b, w, h, u - 0.5, v - 0.5);
                let a = self.a[y * w + x];
                let r = m * a - bw;
                num += r.abs();
                den += m;
                if !with_grad {
                    continue;
                }
                let s = if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                for i in 0..8 {
                    let ki = &k[i];
                    let dq = [
                        -(ki[0][0] * q[0] + ki[0][1] * q[1] + ki[0][2] * q[2]),
                        -(ki[1][0] * q[0] + ki[1][1] * q[1] + ki[1][2] * q[2]),
                        -(ki[2][0] * q[0] + ki[2][1] * q[1] + ki[2][2] * q[2]),
                    ];
                    let du = (dq[0] - u * dq[2]) / q[2];
                    let dv = (dq[1] - v * dq[2]) / q[2];
                    let dm = mu * du + mv * dv;
                    let db = bu * du + bv * dv;
                    dnum[i] += s * (a * dm - db);
                    dden[i] += dm;
                }
            }
        }
        if den < 1.0 {
            return Ok(Eval {
                loss: 0.0,
                coverage: den / (w * h) as f64,
                grad: [0.0; 8],
            });
        }
        let loss = num / den;
        Ok(Eval {
            loss,
            coverage: den / (w * h) as f64,
            grad: std::array::from_fn(|i| (dnum[i] - loss * dden[i]) / den),
        })
    }
}

fn scale_offsets(off: &FourPointOffsets, sx: f64, sy: f64) -> FourPointOffsets {
    FourPointOffsets::new(off.offsets.map(|[dx, dy]| [dx * sx, dy * sy]))
}

/// Normalized gradient descent with step halving on one level.
fn descend(level: &Level, start: FourPointOffsets, bound: f64, cfg: &PyramidConfig) -> Result<(FourPointOffsets, Vec<f64>)> {
    let mut off = start;
    let mut cur = level.eval(&off, true)?;
    let mut trace = vec![cur.loss];
    let mut step = cfg.step_init;
    let mut plateau = 0;
    for _ in 0..cfg.iterations_per_level {
        if step < MIN_STEP {
            break;
        }
        let norm = cur.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        let flat = off.to_flat();
        let cand = FourPointOffsets::from_flat(std::array::from_fn(|i| {
            (flat[i] - step * cur.grad[i] / norm).clamp(-bound, bound)
        }));
        let accepted = match level.eval(&cand, true) {
            Ok(e) if e.coverage >= MIN_OVERLAP && e.loss < cur.loss => Some(e),
            _ => None,
        };
        match accepted {
            Some(e) => {
                let rel = (cur.loss - e.loss) / cur.loss;
                off = cand;
                cur = e;
                trace.push(cur.loss);
                if rel < PLATEAU_TOL {
                    plateau += 1;
                    if plateau >= PLATEAU_ITERS {
                        step *= cfg.step_decay;
                        plateau = 0;
                    }
                } else {
                    plateau = 0;
                }
            }
            None => step *= cfg.step_decay,
        }
    }
    Ok((off, trace))
}

fn check_pair(reference: &Tensor4, target: &Tensor4) -> Result<()> {
    let s = reference.shape();
    if s != target.shape() {
        return Err(Error::shape("align", format!("{s} vs {}", target.shape())));
    }
    if s.n != 1 || !(s.c == 1 || s.c == 3) {
        return Err(Error::shape("align", format!("expected one grayscale or RGB image, got {s}")));
    }
    if !reference.all_finite() || !target.all_finite() {
        return Err(Error::NonFinite("alignment input".into()));
    }
    Ok(())
}

/// Offsets minimizing the ablation loss, from the coarsest level to the finest.
pub fn estimate_offsets(reference: &Tensor4, target: &Tensor4, cfg: &PyramidConfig) -> Result<OffsetEstimate> {
    cfg.validate()?;
    check_pair(reference, target)?;
    let s = reference.shape();
    cfg.check_image(s.w, s.h)?;
    let a = reference.to_luma()?;
    let b = target.to_luma()?;
    let bound = cfg.max_offset.unwrap_or(0.45 * s.w as f64);

    let mut off = FourPointOffsets::ZERO;
    let mut prev = (s.w, s.h);
    let mut trace = Vec::with_capacity(cfg.levels);
    for level in (0..cfg.levels).rev() {
        let (w, h) = (s.w >> level, s.h >> level);
        off = scale_offsets(&off, w as f64 / prev.0 as f64, h as f64 / prev.1 as f64);
        if level == cfg.levels - 1 {
            off = FourPointOffsets::ZERO;
        }
        prev = (w, h);
        let lvl = Level::new(&a, &b, h, w);
        let (found, losses) = descend(&lvl, off, bound * w as f64 / s.w as f64, cfg)?;
        off = found;
        trace.push(LevelTrace {
            level,
            width: w,
            height: h,
            losses,
        });
    }

    let identity_loss = ablation_loss(&a, &b, &Homography::IDENTITY)?.value;
    let at = |o: &FourPointOffsets| -> Result<(f64, bool)> {
        let l = ablation_loss(&a, &b, &solve_dlt(o, (s.w, s.h))?)?;
        Ok((l.value, l.degenerate || l.mask_sum < MIN_OVERLAP * (s.w * s.h) as f64))
    };
    let (final_loss, degenerate) = at(&off).unwrap_or((f64::INFINITY, true));
    if degenerate || final_loss > identity_loss {
        return Ok(OffsetEstimate {
            offsets: FourPointOffsets::ZERO,
            trace,
            final_loss: identity_loss,
            identity_loss,
        });
    }
    Ok(OffsetEstimate {
        offsets: off,
        trace,
        final_loss,
        identity_loss,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentResult {
    pub offsets: FourPointOffsets,
    pub homography: Homography,
    pub canvas: CanvasSpec,
    pub warped_a: Tensor4,
    pub warped_b: Tensor4,
    pub masks: MaskSet,
    pub final_loss: f64,
    pub degenerate: bool,
}

/// Build canvas, warped images and masks for given offsets.
pub fn align_with_offsets(reference: &Tensor4, target: &Tensor4, offsets: &FourPointOffsets) -> Result<AlignmentResult> {
    check_pair(reference, target)?;
    let s = reference.shape();
    let size = (s.w, s.h);
    let homography = solve_dlt(offsets, size)?;
    let canvas = canvas_extent(offsets, size)?;
    let warped_a = warp_image(reference, &Homography::IDENTITY, &canvas)?;
    let warped_b = warp_image(target, &homography, &canvas)?;
    let masks = MaskSet::from_content(
        content_mask(&Homography::IDENTITY, &canvas, size)?,
        content_mask(&homography, &canvas, size)?,
    )?;
    let loss = ablation_loss(reference, target, &homography)?;
    Ok(AlignmentResult {
        offsets: *offsets,
        homography,
        canvas,
        warped_a,
        warped_b,
        masks,
        final_loss: loss.value,
        degenerate: loss.degenerate,
    })
}

pub fn align_pair(reference: &Tensor4, target: &Tensor4, cfg: &PyramidConfig) -> Result<AlignmentResult> {
    let est = estimate_offsets(reference, target, cfg)?;
    align_with_offsets(reference, target, &est.offsets)
}
