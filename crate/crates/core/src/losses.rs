//! Objectives for both stages and the frozen perceptual feature stack.
//!
//! L1 terms are masked means: sums are divided by the number of valid
//! pixel-channels so magnitudes do not depend on canvas size or overlap.

use serde::{Deserialize, Serialize};

use crate::geometry::{CanvasSpec, Homography};
use crate::tensorcore::{kernels, Graph, NodeId, Shape4, Tensor4};
use crate::warpmask::{content_mask, warp_image};
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub omega_lr: f64,
    pub omega_hr: f64,
    pub omega_cs: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 2.0,
            lambda_c: 1e-6,
            omega_lr: 100.0,
            omega_hr: 1.0,
            omega_cs: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_s, self.lambda_c, self.omega_lr, self.omega_hr, self.omega_cs];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    pub fn zero() -> Self {
        Self {
            lambda_s: 0.0,
            lambda_c: 0.0,
            omega_lr: 0.0,
            omega_hr: 0.0,
            omega_cs: 0.0,
        }
    }
}

fn same_shape(a: &Tensor4, b: &Tensor4, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(what, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Centered `size x size` window; the patch operator of the padding-based loss.
pub fn center_crop(t: &Tensor4, size: usize) -> Result<Tensor4> {
    let s = t.shape();
    if size == 0 || size > s.h || size > s.w {
        return Err(Error::TooSmall(format!("cannot crop {size}x{size} from {s}")));
    }
    let (y0, x0) = ((s.h - size) / 2, (s.w - size) / 2);
    Ok(Tensor4::from_fn(s.with_spatial(size, size), |n, c, y, x| t.get(n, c, y0 + y, x0 + x)))
}

/// Plain mean absolute difference of two patches.
pub fn padding_loss(ref_patch: &Tensor4, warped_target_patch: &Tensor4) -> Result<f64> {
    same_shape(ref_patch, warped_target_patch, "padding_loss")?;
    let n = ref_patch.shape().len();
    if n == 0 {
        return Err(Error::shape("padding_loss", "empty patch"));
    }
    let s: f64 = ref_patch
        .data()
        .iter()
        .zip(warped_target_patch.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(s / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationLoss {
    pub value: f64,
    /// Set when the warped target covers less than one pixel of the frame.
    pub degenerate: bool,
    pub mask_sum: f64,
}

/// Ablation-masked L1 in the reference frame.
pub fn ablation_loss(reference: &Tensor4, target: &Tensor4, h: &Homography) -> Result<AblationLoss> {
    let s = reference.shape();
    ablation_loss_on(reference, target, h, &CanvasSpec::frame(s.w, s.h))
}

/// Ablation-masked L1 evaluated on an arbitrary canvas; the reference is
/// placed with the identity, the target through `h`. Only pixels inside the
/// reference footprint count, so extra canvas border changes nothing.
pub fn ablation_loss_on(reference: &Tensor4, target: &Tensor4, h: &Homography, canvas: &CanvasSpec) -> Result<AblationLoss> {
    same_shape(reference, target, "ablation_loss")?;
    let s = reference.shape();
    let a = warp_image(reference, &Homography::IDENTITY, canvas)?;
    let frame = content_mask(&Homography::IDENTITY, canvas, (s.w, s.h))?;
    let b = warp_image(target, h, canvas)?.mul_mask(&frame)?;
    let m = content_mask(h, canvas, (s.w, s.h))?.zip_map(&frame, |p, q| p * q)?;
    let mask_sum = m.sum();
    if mask_sum < 1.0 {
        return Ok(AblationLoss {
            value: 0.0,
            degenerate: true,
            mask_sum,
        });
    }
    let ma = a.mul_mask(&m)?;
    let num: f64 = ma.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum();
    Ok(AblationLoss {
        value: num / (mask_sum * s.c as f64),
        degenerate: false,
        mask_sum,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapDepth {
    /// Five pooling stages.
    Deep,
    /// Three pooling stages.
    Shallow,
}

impl TapDepth {
    pub fn stages(self) -> usize {
        match self {
            Self::Deep => 5,
            Self::Shallow => 3,
        }
    }
}

const FEATURE_WIDTHS: [usize; 5] = [8, 16, 32, 32, 32];
const FEATURE_SEED: u64 = 0x5EED_F00D;

/// Frozen conv/relu/maxpool stack used as the perceptual feature map.
///
/// Inputs in [0,1] are multiplied by `input_scale` first, mirroring the
/// 0..255 range classification backbones expect.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    graph: Graph,
    tap: NodeId,
    depth: TapDepth,
    pub input_scale: f64,
}

impl FeatureExtractor {
    pub fn new(depth: TapDepth) -> Self {
        let mut rng = rng::stream(FEATURE_SEED, "features", 0);
        let mut g = Graph::new();
        let mut x = g.input("image", 3).expect("fresh graph");
        for (i, &w) in FEATURE_WIDTHS.iter().take(depth.stages()).enumerate() {
            x = g.conv3x3(&format!("conv{}", i + 1), x, w, &mut rng).expect("valid stage");
            x = g.relu(&format!("relu{}", i + 1), x).expect("valid stage");
            x = g.maxpool2x2(&format!("pool{}", i + 1), x).expect("valid stage");
        }
        g.freeze_all();
        Self {
            graph: g,
            tap: x,
            depth,
            input_scale: 255.0,
        }
    }

    /// Wrap externally supplied weights; the graph must have an `image`
    /// input and a node named `pool{stages}` to tap.
    pub fn from_graph(mut graph: Graph, depth: TapDepth) -> Result<Self> {
        graph.node_id("image")?;
        let tap = graph.node_id(&format!("pool{}", depth.stages()))?;
        graph.freeze_all();
        Ok(Self {
            graph,
            tap,
            depth,
            input_scale: 255.0,
        })
    }

    pub fn depth(&self) -> TapDepth {
        self.depth
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn min_size(&self) -> usize {
        1 << self.depth.stages()
    }

    fn check(&self, x: &Tensor4) -> Result<()> {
        let s = x.shape();
        if s.h < self.min_size() || s.w < self.min_size() {
            return Err(Error::TooSmall(format!(
                "{s} is below the {0}x{0} minimum of the feature extractor",
                self.min_size()
            )));
        }
        Ok(())
    }

    pub fn features(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check(x)?;
        let scaled = x.map(|v| v * self.input_scale);
        let acts = self.graph.forward(&[("image", &scaled)])?;
        Ok(acts.get(self.tap).clone())
    }

    /// Features and the gradient of `<grad_features, features(x)>` w.r.t. `x`.
    fn features_vjp(&self, x: &Tensor4, grad: impl FnOnce(&Tensor4) -> Result<Tensor4>) -> Result<(Tensor4, Tensor4)> {
        self.check(x)?;
        let scaled = x.map(|v| v * self.input_scale);
        let acts = self.graph.forward(&[("image", &scaled)])?;
        let feats = acts.get(self.tap).clone();
        let seed = grad(&feats)?;
        let grads = self.graph.backward_seeded(&acts, &[(self.tap, seed)])?;
        let input = self.graph.node_id("image")?;
        let mut gx = grads
            .node(input)
            .cloned()
            .unwrap_or_else(|| Tensor4::zeros(x.shape()));
        gx.scale(self.input_scale);
        Ok((feats, gx))
    }
}

/// Mean squared difference of the tapped features.
pub fn perceptual_distance(a: &Tensor4, b: &Tensor4, fx: &FeatureExtractor) -> Result<f64> {
    same_shape(a, b, "perceptual_distance")?;
    let fa = fx.features(a)?;
    let fb = fx.features(b)?;
    Ok(mse(&fa, &fb))
}

fn mse(a: &Tensor4, b: &Tensor4) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum();
    s / a.shape().len() as f64
}

/// Perceptual distance and its gradient with respect to `a` (`b` is a constant).
pub fn perceptual_distance_grad(a: &Tensor4, b: &Tensor4, fx: &FeatureExtractor) -> Result<(f64, Tensor4)> {
    same_shape(a, b, "perceptual_distance")?;
    let fb = fx.features(b)?;
    let mut value = 0.0;
    let (_, ga) = fx.features_vjp(a, |fa| {
        value = mse(fa, &fb);
        let k = 2.0 / fa.shape().len() as f64;
        fa.zip_map(&fb, |p, q| k * (p - q))
    })?;
    Ok((value, ga))
}

fn check_canvas(stitched: &Tensor4, others: &[&Tensor4], masks: &[&Tensor4], what: &str) -> Result<()> {
    let s = stitched.shape();
    for o in others {
        same_shape(stitched, o, what)?;
    }
    for m in masks {
        let ms = m.shape();
        if ms != s.with_channels(1) {
            return Err(Error::shape(what, format!("mask {ms} does not match canvas {s}")));
        }
    }
    Ok(())
}

pub fn content_loss(
    stitched: &Tensor4,
    warped_a: &Tensor4,
    warped_b: &Tensor4,
    mask_a: &Tensor4,
    mask_b: &Tensor4,
    fx: &FeatureExtractor,
) -> Result<f64> {
    check_canvas(stitched, &[warped_a, warped_b], &[mask_a, mask_b], "content_loss")?;
    Ok(perceptual_distance(&stitched.mul_mask(mask_a)?, warped_a, fx)?
        + perceptual_distance(&stitched.mul_mask(mask_b)?, warped_b, fx)?)
}

/// Content loss and its gradient with respect to the stitched image.
pub fn content_loss_grad(
    stitched: &Tensor4,
    warped_a: &Tensor4,
    warped_b: &Tensor4,
    mask_a: &Tensor4,
    mask_b: &Tensor4,
    fx: &FeatureExtractor,
) -> Result<(f64, Tensor4)> {
    check_canvas(stitched, &[warped_a, warped_b], &[mask_a, mask_b], "content_loss")?;
    let (va, ga) = perceptual_distance_grad(&stitched.mul_mask(mask_a)?, warped_a, fx)?;
    let (vb, gb) = perceptual_distance_grad(&stitched.mul_mask(mask_b)?, warped_b, fx)?;
    let mut g = ga.mul_mask(mask_a)?;
    g.add_assign(&gb.mul_mask(mask_b)?)?;
    Ok((va + vb, g))
}

/// `sum M |S - I| / (C sum M)`, zero for an empty mask, plus its gradient in `S`.
fn masked_l1(s: &Tensor4, i: &Tensor4, m: &Tensor4) -> (f64, Tensor4) {
    let sh = s.shape();
    let area = m.sum() * sh.c as f64;
    let mut g = Tensor4::zeros(sh);
    if area <= 0.0 {
        return (0.0, g);
    }
    let mut acc = 0.0;
    for n in 0..sh.n {
        let mp = m.plane(n, 0);
        for c in 0..sh.c {
            let (sp, ip) = (s.plane(n, c), i.plane(n, c));
            let gp = g.plane_mut(n, c);
            for k in 0..mp.len() {
                let d = mp[k] * sp[k] - ip[k] * mp[k];
                acc += d.abs();
                gp[k] = mp[k] * d.signum() * (d != 0.0) as u8 as f64 / area;
            }
        }
    }
    (acc / area, g)
}

pub fn seam_loss(stitched: &Tensor4, warped_a: &Tensor4, warped_b: &Tensor4, seam_a: &Tensor4, seam_b: &Tensor4) -> Result<f64> {
    seam_loss_grad(stitched, warped_a, warped_b, seam_a, seam_b).map(|(v, _)| v)
}

/// Seam loss and its gradient with respect to the stitched image.
pub fn seam_loss_grad(
    stitched: &Tensor4,
    warped_a: &Tensor4,
    warped_b: &Tensor4,
    seam_a: &Tensor4,
    seam_b: &Tensor4,
) -> Result<(f64, Tensor4)> {
    check_canvas(stitched, &[warped_a, warped_b], &[seam_a, seam_b], "seam_loss")?;
    let (va, mut ga) = masked_l1(stitched, warped_a, seam_a);
    let (vb, gb) = masked_l1(stitched, warped_b, seam_b);
    ga.add_assign(&gb)?;
    Ok((va + vb, ga))
}

pub fn stage_total(content: f64, seam: f64, w: &LossWeights) -> f64 {
    w.lambda_c * content + w.lambda_s * seam
}

#[derive(Clone, Debug)]
pub struct ConsistencyLoss {
    pub value: f64,
    pub grad_hr: Tensor4,
    pub grad_lr: Tensor4,
}

fn check_consistency(s_hr: &Tensor4, s_lr: &Tensor4) -> Result<()> {
    let (h, l) = (s_hr.shape(), s_lr.shape());
    if h.n != l.n || h.c != l.c {
        return Err(Error::shape("consistency_loss", format!("{h} vs {l}")));
    }
    if h.h < l.h || h.w < l.w {
        return Err(Error::TooSmall(format!("high-resolution output {h} is smaller than {l}")));
    }
    Ok(())
}

/// Mean |resize(S_HR) - S_LR| at the low-resolution size.
pub fn consistency_loss(s_hr: &Tensor4, s_lr: &Tensor4) -> Result<f64> {
    check_consistency(s_hr, s_lr)?;
    let l = s_lr.shape();
    let down = kernels::resize_bilinear(s_hr, l.h, l.w);
    padding_loss(&down, s_lr)
}

pub fn consistency_loss_grad(s_hr: &Tensor4, s_lr: &Tensor4) -> Result<ConsistencyLoss> {
    check_consistency(s_hr, s_lr)?;
    let l = s_lr.shape();
    let down = kernels::resize_bilinear(s_hr, l.h, l.w);
    let n = l.len() as f64;
    let value = padding_loss(&down, s_lr)?;
    let g_down = down.zip_map(s_lr, |p, q| {
        let d = p - q;
        if d == 0.0 { 0.0 } else { d.signum() / n }
    })?;
    let grad_hr = kernels::resize_bilinear_backward(&g_down, s_hr.shape());
    let grad_lr = g_down.map(|v| -v);
    Ok(ConsistencyLoss { value, grad_hr, grad_lr })
}

pub fn reconstruction_objective(l_lr: f64, l_hr: f64, l_cs: f64, w: &LossWeights) -> f64 {
    w.omega_lr * l_lr + w.omega_hr * l_hr + w.omega_cs * l_cs
}

/// Single-channel mask of ones matching a canvas-shaped image.
pub fn full_mask(like: &Tensor4) -> Tensor4 {
    let s = like.shape();
    Tensor4::filled(Shape4::new(s.n, 1, s.h, s.w), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::rel_err;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(c: usize, h: usize, w: usize, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(Shape4::new(1, c, h, w), |_, _, _, _| rng.random_range(0.0..1.0))
    }

    fn binary_mask(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Tensor4 {
        Tensor4::from_fn(Shape4::new(1, 1, h, w), |_, _, y, x| f(y, x) as u8 as f64)
    }

    #[test]
    fn padding_loss_examples() {
        let a = random(3, 8, 8, 1);
        assert_eq!(padding_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.5);
        assert!((padding_loss(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        let c = random(3, 8, 8, 2);
        let mut acc = 0.0;
        for i in 0..a.data().len() {
            acc += (a.data()[i] - c.data()[i]).abs();
        }
        assert!((padding_loss(&a, &c).unwrap() - acc / 192.0).abs() < 1e-12);
        assert!(padding_loss(&a, &random(3, 8, 7, 3)).is_err());
    }

    #[test]
    fn ablation_loss_examples() {
        let r = random(3, 24, 24, 4);
        let id = ablation_loss(&r, &r, &Homography::IDENTITY).unwrap();
        assert_eq!(id.value, 0.0);
        assert!(!id.degenerate);

        let out = ablation_loss(&r, &r, &Homography::translation(100.0, 0.0)).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.degenerate);
    }

    /// Masked L1 with the reference frame, written as nested loops.
    fn ablation_oracle(r: &Tensor4, t: &Tensor4, shift: i64) -> f64 {
        let s = r.shape();
        let (mut num, mut den) = (0.0, 0.0);
        for y in 0..s.h {
            for x in 0..s.w {
                let sx = x as i64 - shift;
                let valid = sx >= 0 && (sx as usize) < s.w;
                if !valid {
                    continue;
                }
                den += 1.0;
                for c in 0..s.c {
                    num += (r.get(0, c, y, x) - t.get(0, c, y, sx as usize)).abs();
                }
            }
        }
        num / (den * s.c as f64)
    }

    #[test]
    fn ablation_loss_prefers_true_translation() {
        // reference(x) = target(x - 4)
        let t = random(3, 20, 20, 5);
        let r = Tensor4::from_fn(t.shape(), |n, c, y, x| if x >= 4 { t.get(n, c, y, x - 4) } else { 0.3 });
        let at_truth = ablation_loss(&r, &t, &Homography::translation(4.0, 0.0)).unwrap().value;
        let at_id = ablation_loss(&r, &t, &Homography::IDENTITY).unwrap().value;
        assert!((at_truth - ablation_oracle(&r, &t, 4)).abs() < 1e-12);
        assert!((at_id - ablation_oracle(&r, &t, 0)).abs() < 1e-12);
        assert_eq!(at_truth, 0.0);
        assert!(at_truth < at_id);
    }

    #[test]
    fn ablation_loss_ignores_canvas_enlargement() {
        let r = random(1, 16, 16, 6);
        let t = random(1, 16, 16, 7);
        let h = Homography::translation(2.5, -1.25);
        let base = ablation_loss(&r, &t, &h).unwrap().value;
        let big = CanvasSpec {
            width: 23,
            height: 21,
            origin_shift: (3.0, 2.0),
        };
        let enlarged = ablation_loss_on(&r, &t, &h, &big).unwrap().value;
        assert!((base - enlarged).abs() < 1e-12, "{base} {enlarged}");
    }

    #[test]
    fn extractor_is_frozen_and_deterministic() {
        let a = FeatureExtractor::new(TapDepth::Deep);
        let b = FeatureExtractor::new(TapDepth::Deep);
        assert_eq!(a.graph().params(), b.graph().params());
        assert!(a.graph().param_info().iter().all(|p| p.frozen));
        let s = FeatureExtractor::new(TapDepth::Shallow);
        assert_eq!(s.graph().params(), &a.graph().params()[..6]);
        assert!(a.features(&random(3, 16, 16, 8)).is_err());
        assert_eq!(a.features(&random(3, 32, 32, 8)).unwrap().shape(), Shape4::new(1, 32, 1, 1));
    }

    #[test]
    fn perceptual_distance_examples() {
        let fx = FeatureExtractor::new(TapDepth::Shallow);
        let a = random(3, 16, 16, 9);
        let b = random(3, 16, 16, 10);
        assert_eq!(perceptual_distance(&a, &a, &fx).unwrap(), 0.0);
        assert_eq!(
            perceptual_distance(&a, &b, &fx).unwrap(),
            perceptual_distance(&b, &a, &fx).unwrap()
        );
        let noise = random(3, 16, 16, 11).map(|v| v - 0.5);
        let d: Vec<f64> = [1e-3, 1e-2, 1e-1]
            .iter()
            .map(|&e| perceptual_distance(&a, &a.zip_map(&noise, |p, q| p + e * q).unwrap(), &fx).unwrap())
            .collect();
        assert!(d[0] < d[1] && d[1] < d[2], "{d:?}");
    }

    fn fd_check(f: impl Fn(&Tensor4) -> f64, grad: &Tensor4, x: &Tensor4, samples: usize, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eps = 1e-6;
        for _ in 0..samples {
            let i = rng.random_range(0..x.data().len());
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let num = (f(&xp) - f(&xm)) / (2.0 * eps);
            let err = rel_err(grad.data()[i], num);
            assert!(err < tol, "index {i}: analytic {} numeric {num}", grad.data()[i]);
        }
    }

    #[test]
    fn content_and_seam_losses() {
        let (h, w) = (16, 16);
        let ma = binary_mask(h, w, |_, x| x < 11);
        let mb = binary_mask(h, w, |_, x| x >= 5);
        let base = random(3, h, w, 12);
        let wa = base.mul_mask(&ma).unwrap();
        let wb = base.mul_mask(&mb).unwrap();
        let fx = FeatureExtractor::new(TapDepth::Shallow);
        assert_eq!(content_loss(&base, &wa, &wb, &ma, &mb, &fx).unwrap(), 0.0);

        let s = random(3, h, w, 13);
        let composed = perceptual_distance(&s.mul_mask(&ma).unwrap(), &wa, &fx).unwrap()
            + perceptual_distance(&s.mul_mask(&mb).unwrap(), &wb, &fx).unwrap();
        assert!((content_loss(&s, &wa, &wb, &ma, &mb, &fx).unwrap() - composed).abs() < 1e-12);

        let zero = Tensor4::zeros(ma.shape());
        assert_eq!(seam_loss(&s, &wa, &wb, &zero, &zero).unwrap(), 0.0);
        assert_eq!(seam_loss(&base, &base, &base, &ma, &mb).unwrap(), 0.0);

        // Half-plane seam band against a scalar loop.
        let sa = binary_mask(h, w, |_, x| (5..=7).contains(&x));
        let sb = binary_mask(h, w, |_, x| (8..=10).contains(&x));
        let mut expected = 0.0;
        for (m, img) in [(&sa, &wa), (&sb, &wb)] {
            let (mut num, mut den) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let k = m.get(0, 0, y, x);
                    den += 3.0 * k;
                    for c in 0..3 {
                        num += (s.get(0, c, y, x) * k - img.get(0, c, y, x) * k).abs();
                    }
                }
            }
            expected += num / den;
        }
        assert!((seam_loss(&s, &wa, &wb, &sa, &sb).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (h, w) = (16, 16);
        let ma = binary_mask(h, w, |_, x| x < 11);
        let mb = binary_mask(h, w, |_, x| x >= 5);
        let wa = random(3, h, w, 14).mul_mask(&ma).unwrap();
        let wb = random(3, h, w, 15).mul_mask(&mb).unwrap();
        let s = random(3, h, w, 16);
        let fx = FeatureExtractor::new(TapDepth::Shallow);

        let (_, g) = content_loss_grad(&s, &wa, &wb, &ma, &mb, &fx).unwrap();
        fd_check(|x| content_loss(x, &wa, &wb, &ma, &mb, &fx).unwrap(), &g, &s, 40, 1e-4);

        let sa = binary_mask(h, w, |_, x| (5..=7).contains(&x));
        let sb = binary_mask(h, w, |_, x| (8..=10).contains(&x));
        let (_, g) = seam_loss_grad(&s, &wa, &wb, &sa, &sb).unwrap();
        fd_check(|x| seam_loss(x, &wa, &wb, &sa, &sb).unwrap(), &g, &s, 40, 1e-4);

        let hr = random(3, 24, 20, 17);
        let lr = random(3, 12, 10, 18);
        let cl = consistency_loss_grad(&hr, &lr).unwrap();
        fd_check(|x| consistency_loss(x, &lr).unwrap(), &cl.grad_hr, &hr, 40, 1e-4);
        fd_check(|x| consistency_loss(&hr, x).unwrap(), &cl.grad_lr, &lr, 40, 1e-4);
    }

    #[test]
    fn stage_and_objective_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(stage_total(0.0, 0.0, &w), 0.0);
        assert!((stage_total(1.0, 1.0, &w) - 2.000001).abs() < 1e-12);
        for (c, s) in [(0.5, 0.0), (0.0, 0.25), (3.0, 7.0)] {
            let lin = w.lambda_c * c + w.lambda_s * s;
            assert!((stage_total(c, s, &w) - lin).abs() < 1e-15);
        }
        assert_eq!(reconstruction_objective(0.0, 0.0, 0.0, &w), 0.0);
        assert!((reconstruction_objective(0.01, 0.5, 0.2, &w) - 1.7).abs() < 1e-12);
        let p = LossWeights {
            omega_lr: w.omega_hr,
            omega_hr: w.omega_cs,
            omega_cs: w.omega_lr,
            ..w
        };
        assert_eq!(
            reconstruction_objective(0.01, 0.5, 0.2, &w),
            reconstruction_objective(0.5, 0.2, 0.01, &p)
        );
    }

    #[test]
    fn consistency_examples() {
        let lr = random(3, 8, 8, 19);
        assert_eq!(consistency_loss(&lr, &lr).unwrap(), 0.0);
        let c1 = Tensor4::filled(Shape4::new(1, 3, 16, 16), 0.2);
        let c2 = Tensor4::filled(Shape4::new(1, 3, 8, 8), 0.7);
        assert!((consistency_loss(&c1, &c2).unwrap() - 0.5).abs() < 1e-12);
        assert!(consistency_loss(&c2, &c1).is_err());
        let hr = random(3, 16, 16, 20);
        let down = kernels::resize_bilinear(&hr, 8, 8);
        let mut acc = 0.0;
        for i in 0..down.data().len() {
            acc += (down.data()[i] - lr.data()[i]).abs();
        }
        assert!((consistency_loss(&hr, &lr).unwrap() - acc / 192.0).abs() < 1e-12);
    }
}
