//! WebAssembly bindings for the browser demo in `www/`.
//!
//! The page generates a synthetic pair, lets the user drag the four corner
//! offsets or run the optimizer, and shows the stitching-domain composite
//! and masks. Images cross the boundary as RGBA byte buffers.

use stitchkit::align::{align_with_offsets, estimate_offsets, AlignmentResult, PyramidConfig};
use stitchkit::datakit::{gen_synthetic_pair, procedural_source};
use stitchkit::geometry::FourPointOffsets;
use stitchkit::{Result, Tensor4};
use wasm_bindgen::prelude::*;

fn js_err(e: stitchkit::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn to_rgba(t: &Tensor4) -> Vec<u8> {
    let s = t.shape();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = Vec::with_capacity(s.h * s.w * 4);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push(q(t.get(0, c.min(s.c - 1), y, x)));
            }
            out.push(255);
        }
    }
    out
}

fn offsets_from(flat: &[f64]) -> Result<FourPointOffsets> {
    let arr: [f64; 8] = flat
        .try_into()
        .map_err(|_| stitchkit::Error::OutOfRange(format!("expected 8 offsets, got {}", flat.len())))?;
    Ok(FourPointOffsets::from_flat(arr))
}

/// Coverage-weighted blend of the two warped images on the canvas.
pub fn composite(r: &AlignmentResult) -> Tensor4 {
    let (a, b) = (&r.warped_a, &r.warped_b);
    let (ma, mb) = (&r.masks.content_a, &r.masks.content_b);
    Tensor4::from_fn(a.shape(), |n, c, y, x| {
        let total = ma.get(n, 0, y, x) + mb.get(n, 0, y, x);
        if total <= 0.0 {
            0.0
        } else {
            (a.get(n, c, y, x) + b.get(n, c, y, x)) / total
        }
    })
}

/// Content masks in the red and green channels, seams in blue.
pub fn mask_view(r: &AlignmentResult) -> Tensor4 {
    let m = &r.masks;
    Tensor4::from_fn(m.content_a.shape().with_channels(3), |n, c, y, x| match c {
        0 => 0.6 * m.content_a.get(n, 0, y, x),
        1 => 0.6 * m.content_b.get(n, 0, y, x),
        _ => m.seam_a.get(n, 0, y, x).max(m.seam_b.get(n, 0, y, x)),
    })
}

#[wasm_bindgen]
pub struct Demo {
    reference: Tensor4,
    target: Tensor4,
    truth: FourPointOffsets,
    view: Option<AlignmentResult>,
}

#[wasm_bindgen]
impl Demo {
    /// A synthetic pair cut from a procedural texture.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize, disturbance: f64) -> std::result::Result<Demo, JsError> {
        let margin = disturbance.ceil() as usize;
        let side = size + 2 * margin + 16;
        let src = procedural_source(side, side, seed);
        let p = gen_synthetic_pair(&src, disturbance, size, seed).map_err(js_err)?;
        Ok(Self {
            reference: p.reference,
            target: p.target,
            truth: p.truth,
            view: None,
        })
    }

    pub fn size(&self) -> usize {
        self.reference.shape().w
    }

    pub fn reference_rgba(&self) -> Vec<u8> {
        to_rgba(&self.reference)
    }

    pub fn target_rgba(&self) -> Vec<u8> {
        to_rgba(&self.target)
    }

    pub fn truth(&self) -> Vec<f64> {
        self.truth.to_flat().to_vec()
    }

    /// Run the coarse-to-fine optimizer; returns the eight offsets.
    pub fn align(&self, levels: usize, iterations: usize) -> std::result::Result<Vec<f64>, JsError> {
        let cfg = PyramidConfig {
            levels,
            iterations_per_level: iterations,
            ..PyramidConfig::default()
        };
        let est = estimate_offsets(&self.reference, &self.target, &cfg).map_err(js_err)?;
        Ok(est.offsets.to_flat().to_vec())
    }

    /// Warp both images onto the stitching domain for the given offsets.
    /// Returns `[canvas_width, canvas_height, ablation_loss, overlap_rate]`.
    pub fn warp(&mut self, offsets: &[f64]) -> std::result::Result<Vec<f64>, JsError> {
        let off = offsets_from(offsets).map_err(js_err)?;
        let r = align_with_offsets(&self.reference, &self.target, &off).map_err(js_err)?;
        let rate = r.masks.overlap_rate().map_err(js_err)?;
        let info = vec![r.canvas.width as f64, r.canvas.height as f64, r.final_loss, rate];
        self.view = Some(r);
        Ok(info)
    }

    /// RGBA composite of the last `warp` call.
    pub fn composite_rgba(&self) -> Vec<u8> {
        self.view.as_ref().map(|r| to_rgba(&composite(r))).unwrap_or_default()
    }

    /// RGBA mask visualization of the last `warp` call.
    pub fn masks_rgba(&self) -> Vec<u8> {
        self.view.as_ref().map(|r| to_rgba(&mask_view(r))).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_offsets_give_a_low_loss_view() {
        let mut d = Demo::new(3, 64, 8.0).unwrap();
        let info = d.warp(&d.truth()).unwrap();
        assert!(info[2] < 1e-2);
        let (w, h) = (info[0] as usize, info[1] as usize);
        assert_eq!(d.composite_rgba().len(), w * h * 4);
        assert_eq!(d.masks_rgba().len(), w * h * 4);
    }

    #[test]
    fn identity_view_is_the_reference() {
        let mut d = Demo::new(4, 48, 0.0).unwrap();
        d.warp(&[0.0; 8]).unwrap();
        assert_eq!(d.composite_rgba(), d.reference_rgba());
    }

    #[test]
    fn optimizer_beats_identity() {
        let d = Demo::new(5, 64, 8.0).unwrap();
        let est = d.align(2, 100).unwrap();
        let t = d.truth();
        let err = |e: &[f64]| e.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        assert!(err(&est) < 0.25 * err(&[0.0; 8]));
    }
}
