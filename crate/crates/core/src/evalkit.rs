//! Overlap-region image quality, corner RMSE, dataset taxonomy and
//! percentile-bucketed reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{CanvasSpec, FourPointOffsets, Homography};
use crate::tensorcore::Tensor4;
use crate::warpmask::{content_mask, warp_image};
use crate::{Error, Result};

/// Reports clamp infinite PSNR (zero error) to this value.
pub const PSNR_CAP: f64 = 100.0;

const FULL: f64 = 1.0 - 1e-9;

/// Warp the target into the reference frame and return it with the mask of
/// fully valid pixels.
fn overlap_pair(reference: &Tensor4, target: &Tensor4, h: &Homography) -> Result<(Tensor4, Tensor4)> {
    if reference.shape() != target.shape() {
        return Err(Error::shape("overlap metrics", format!("{} vs {}", reference.shape(), target.shape())));
    }
    let s = reference.shape();
    let canvas = CanvasSpec::frame(s.w, s.h);
    let warped = warp_image(target, h, &canvas)?;
    let mask = content_mask(h, &canvas, (s.w, s.h))?;
    Ok((warped, mask))
}

/// PSNR over pixels where `mask` is fully valid, peak 1.0. Zero error gives +inf.
pub fn psnr_masked(a: &Tensor4, b: &Tensor4, mask: &Tensor4) -> Result<f64> {
    let s = a.shape();
    if b.shape() != s || mask.shape() != s.with_channels(1) {
        return Err(Error::shape("psnr", format!("{s} / {} / {}", b.shape(), mask.shape())));
    }
    let (mut se, mut count) = (0.0, 0usize);
    for n in 0..s.n {
        let m = mask.plane(n, 0);
        for c in 0..s.c {
            let (pa, pb) = (a.plane(n, c), b.plane(n, c));
            for i in 0..m.len() {
                if m[i] >= FULL {
                    se += (pa[i] - pb[i]).powi(2);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::DegenerateOverlap("no fully valid pixels".into()));
    }
    let mse = se / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub fn psnr_overlap(reference: &Tensor4, target: &Tensor4, h: &Homography) -> Result<f64> {
    let (warped, mask) = overlap_pair(reference, target, h)?;
    psnr_masked(reference, &warped, &mask)
}

pub fn cap_psnr(db: f64) -> f64 {
    db.min(PSNR_CAP)
}

const WIN: usize = 11;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; WIN * WIN] {
    let sigma = 1.5f64;
    let r = (WIN / 2) as f64;
    let g: Vec<f64> = (0..WIN).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let mut w = [0.0; WIN * WIN];
    for y in 0..WIN {
        for x in 0..WIN {
            w[y * WIN + x] = g[y] * g[x] / total;
        }
    }
    w
}

struct WindowStats {
    mx: f64,
    my: f64,
    vx: f64,
    vy: f64,
    cov: f64,
}

impl WindowStats {
    fn ssim(&self) -> f64 {
        ((2.0 * self.mx * self.my + C1) * (2.0 * self.cov + C2))
            / ((self.mx * self.mx + self.my * self.my + C1) * (self.vx + self.vy + C2))
    }

    /// Contrast-structure factor alone.
    #[cfg(test)]
    fn cs(&self) -> f64 {
        (2.0 * self.cov + C2) / (self.vx + self.vy + C2)
    }
}

/// Apply `f` to the statistics of every 11x11 window lying fully inside
/// the valid mask, over all channels, and average.
fn windowed_mean(a: &Tensor4, b: &Tensor4, mask: &Tensor4, f: impl Fn(&WindowStats) -> f64) -> Result<f64> {
    let s = a.shape();
    if b.shape() != s || mask.shape() != s.with_channels(1) {
        return Err(Error::shape("ssim", format!("{s} / {} / {}", b.shape(), mask.shape())));
    }
    if s.h < WIN || s.w < WIN {
        return Err(Error::TooSmall(format!("SSIM needs at least {WIN}x{WIN}, got {s}")));
    }
    let win = gaussian_window();
    let (mut acc, mut count) = (0.0, 0usize);
    for n in 0..s.n {
        let m = mask.plane(n, 0);
        // Valid-window test via a summed-area table of the binarized mask.
        let mut sat = vec![0usize; (s.h + 1) * (s.w + 1)];
        for y in 0..s.h {
            for x in 0..s.w {
                let v = usize::from(m[y * s.w + x] >= FULL);
                sat[(y + 1) * (s.w + 1) + x + 1] =
                    v + sat[y * (s.w + 1) + x + 1] + sat[(y + 1) * (s.w + 1) + x] - sat[y * (s.w + 1) + x];
            }
        }
        let full = |y0: usize, x0: usize| {
            let (y1, x1) = (y0 + WIN, x0 + WIN);
            sat[y1 * (s.w + 1) + x1] + sat[y0 * (s.w + 1) + x0] - sat[y0 * (s.w + 1) + x1] - sat[y1 * (s.w + 1) + x0]
                == WIN * WIN
        };
        for y0 in 0..=s.h - WIN {
            for x0 in 0..=s.w - WIN {
                if !full(y0, x0) {
                    continue;
                }
                for c in 0..s.c {
                    let (pa, pb) = (a.plane(n, c), b.plane(n, c));
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..WIN {
                        let row = (y0 + dy) * s.w + x0;
                        for dx in 0..WIN {
                            let wt = win[dy * WIN + dx];
                            let (p, q) = (pa[row + dx], pb[row + dx]);
                            mx += wt * p;
                            my += wt * q;
                            xx += wt * p * p;
                            yy += wt * q * q;
                            xy += wt * p * q;
                        }
                    }
                    let st = WindowStats {
                        mx,
                        my,
                        vx: xx - mx * mx,
                        vy: yy - my * my,
                        cov: xy - mx * my,
                    };
                    acc += f(&st);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::TooSmall(format!("no {WIN}x{WIN} window fits inside the overlap")));
    }
    Ok(acc / count as f64)
}

/// Single-scale SSIM averaged over windows fully inside the valid mask.
pub fn ssim_masked(a: &Tensor4, b: &Tensor4, mask: &Tensor4) -> Result<f64> {
    windowed_mean(a, b, mask, WindowStats::ssim)
}

pub fn ssim_overlap(reference: &Tensor4, target: &Tensor4, h: &Homography) -> Result<f64> {
    let (warped, mask) = overlap_pair(reference, target, h)?;
    ssim_masked(reference, &warped, &mask)
}

/// Root mean square over the eight offset scalars.
pub fn four_pt_rmse(estimated: &FourPointOffsets, truth: &FourPointOffsets) -> f64 {
    let (e, t) = (estimated.to_flat(), truth.to_flat());
    let s: f64 = e.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum();
    (s / 8.0).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapLevel {
    Low,
    Middle,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParallaxLevel {
    Small,
    Large,
}

/// HIGH above 90%, MIDDLE on [60%, 90%], LOW below 60%.
pub fn classify_overlap(rate: f64) -> Result<OverlapLevel> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::OutOfRange(format!("overlap rate {rate} outside [0, 1]")));
    }
    Ok(if rate > 0.9 {
        OverlapLevel::High
    } else if rate >= 0.6 {
        OverlapLevel::Middle
    } else {
        OverlapLevel::Low
    })
}

/// SMALL up to and including 30 px of residual misalignment.
pub fn classify_parallax(max_misalignment_px: f64) -> ParallaxLevel {
    if max_misalignment_px <= 30.0 {
        ParallaxLevel::Small
    } else {
        ParallaxLevel::Large
    }
}

/// Largest distance between where two homographies send the same points.
pub fn max_misalignment(a: &Homography, b: &Homography, points: &[(f64, f64)]) -> Result<f64> {
    let mut worst = 0.0f64;
    for &(x, y) in points {
        let (p, q) = (a.apply(x, y)?, b.apply(x, y)?);
        worst = worst.max(((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt());
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetric {
    pub id: String,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    LowerIsBetter,
    HigherIsBetter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub count: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub quality: Quality,
    /// Samples best first.
    pub samples: Vec<SampleMetric>,
    pub buckets: Vec<Bucket>,
    pub average: f64,
}

pub const MIN_REPORT_SAMPLES: usize = 10;

/// Sort best first and average the 0-30%, 30-60% and 60-100% tranches.
pub fn build_report(metric: &str, samples: &[SampleMetric], quality: Quality) -> Result<EvalReport> {
    let n = samples.len();
    if n < MIN_REPORT_SAMPLES {
        return Err(Error::TooSmall(format!("a report needs at least {MIN_REPORT_SAMPLES} samples, got {n}")));
    }
    if let Some(bad) = samples.iter().find(|s| s.value.is_nan()) {
        return Err(Error::NonFinite(format!("metric of sample {}", bad.id)));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| match quality {
        Quality::LowerIsBetter => a.value.total_cmp(&b.value),
        Quality::HigherIsBetter => b.value.total_cmp(&a.value),
    });
    let cuts = [0, n * 3 / 10, n * 6 / 10, n];
    let labels = ["top 0-30%", "top 30-60%", "top 60-100%"];
    let mean = |xs: &[SampleMetric]| xs.iter().map(|s| s.value).sum::<f64>() / xs.len() as f64;
    let buckets = labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let part = &sorted[cuts[i]..cuts[i + 1]];
            Bucket {
                label: (*label).to_string(),
                count: part.len(),
                mean: mean(part),
            }
        })
        .collect();
    Ok(EvalReport {
        metric: metric.to_string(),
        quality,
        average: mean(&sorted),
        samples: sorted,
        buckets,
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<14}{:>8}{:>14}", self.metric, "count", "mean");
        for b in &self.buckets {
            let _ = writeln!(out, "{:<14}{:>8}{:>14.4}", b.label, b.count, b.mean);
        }
        let _ = writeln!(out, "{:<14}{:>8}{:>14.4}", "average", self.samples.len(), self.average);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("id,{}\n", self.metric);
        for s in &self.samples {
            let _ = writeln!(out, "{},{}", s.id, s.value);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, lo: f64, hi: f64, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(Shape4::new(1, 3, h, w), |_, _, _, _| rng.random_range(lo..hi))
    }

    #[test]
    fn psnr_examples() {
        let a = random(64, 64, 0.2, 0.8, 1);
        assert_eq!(psnr_overlap(&a, &a, &Homography::IDENTITY).unwrap(), f64::INFINITY);
        assert_eq!(cap_psnr(psnr_overlap(&a, &a, &Homography::IDENTITY).unwrap()), PSNR_CAP);

        let half = 0.01f64.mul_add(3.0, 0.0).sqrt();
        let noise = random(64, 64, -half, half, 2);
        let b = a.zip_map(&noise, |p, q| p + q).unwrap();
        let db = psnr_overlap(&a, &b, &Homography::IDENTITY).unwrap();
        assert!((db - 20.0).abs() < 0.1, "{db}");
        // Exchanging which image carries the noise.
        let db2 = psnr_overlap(&b, &a, &Homography::IDENTITY).unwrap();
        assert!((db - db2).abs() < 1e-12);
    }

    #[test]
    fn psnr_ignores_pixels_outside_the_overlap() {
        let a = random(32, 32, 0.0, 1.0, 3);
        let b = random(32, 32, 0.0, 1.0, 4);
        let h = Homography::translation(10.0, 0.0);
        let base = psnr_overlap(&a, &b, &h).unwrap();
        // Reference columns 0..10 and target columns 22..32 never meet.
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..10 {
                    a2.set(0, c, y, x, 0.123);
                    b2.set(0, c, y, x + 22, 0.987);
                }
            }
        }
        assert_eq!(base, psnr_overlap(&a2, &b2, &h).unwrap());
        assert!(psnr_overlap(&a, &b, &Homography::translation(40.0, 0.0)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = random(64, 64, 0.0, 1.0, 5);
        assert!((ssim_overlap(&a, &a, &Homography::IDENTITY).unwrap() - 1.0).abs() < 1e-12);
        let b = random(64, 64, 0.0, 1.0, 6);
        assert!(ssim_overlap(&a, &b, &Homography::IDENTITY).unwrap().abs() < 0.1);
        let c1 = Tensor4::filled(a.shape(), 0.2);
        let c2 = Tensor4::filled(a.shape(), 0.7);
        let s = ssim_overlap(&c1, &c2, &Homography::IDENTITY).unwrap();
        assert!(s < 1.0 && s > 0.0);
        assert!(ssim_overlap(&a, &a, &Homography::translation(60.0, 0.0)).is_err());
    }

    #[test]
    fn contrast_structure_term_is_shift_invariant() {
        let a = random(32, 32, 0.0, 0.5, 7);
        let b = random(32, 32, 0.0, 0.5, 8);
        let m = Tensor4::filled(Shape4::new(1, 1, 32, 32), 1.0);
        let base = windowed_mean(&a, &b, &m, WindowStats::cs).unwrap();
        let shifted = windowed_mean(&a.map(|v| v + 0.4), &b.map(|v| v + 0.4), &m, WindowStats::cs).unwrap();
        assert!((base - shifted).abs() < 1e-6);
    }

    #[test]
    fn rmse_examples() {
        let z = FourPointOffsets::ZERO;
        assert_eq!(four_pt_rmse(&z, &z), 0.0);
        // Per-scalar mean: (9 + 16) / 2 per corner.
        let r = four_pt_rmse(&z, &FourPointOffsets::uniform(3.0, 4.0));
        assert!((r - 5.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn identity_rmse_matches_reported_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let t = FourPointOffsets::from_flat([0.0; 8].map(|_: f64| rng.random_range(-32.0..=32.0)));
                four_pt_rmse(&FourPointOffsets::ZERO, &t)
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - 18.5220).abs() / 18.5220 < 0.05, "{mean}");
    }

    #[test]
    fn classification_boundaries() {
        assert_eq!(classify_overlap(0.95).unwrap(), OverlapLevel::High);
        assert_eq!(classify_overlap(0.75).unwrap(), OverlapLevel::Middle);
        assert_eq!(classify_overlap(0.59).unwrap(), OverlapLevel::Low);
        assert_eq!(classify_overlap(0.9).unwrap(), OverlapLevel::Middle);
        assert_eq!(classify_overlap(0.6).unwrap(), OverlapLevel::Middle);
        assert!(classify_overlap(1.2).is_err());
        assert_eq!(classify_parallax(0.0), ParallaxLevel::Small);
        assert_eq!(classify_parallax(29.9), ParallaxLevel::Small);
        assert_eq!(classify_parallax(30.0), ParallaxLevel::Small);
        assert_eq!(classify_parallax(30.1), ParallaxLevel::Large);
    }

    fn metrics(values: &[f64]) -> Vec<SampleMetric> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| SampleMetric {
                id: format!("s{i}"),
                value: v,
            })
            .collect()
    }

    #[test]
    fn report_buckets() {
        let vals: Vec<f64> = (1..=10).rev().map(f64::from).collect();
        let r = build_report("rmse", &metrics(&vals), Quality::LowerIsBetter).unwrap();
        let means: Vec<f64> = r.buckets.iter().map(|b| b.mean).collect();
        assert_eq!(means, [2.0, 5.0, 8.5]);
        assert_eq!(r.buckets.iter().map(|b| b.count).sum::<usize>(), 10);
        let weighted: f64 = r.buckets.iter().map(|b| b.mean * b.count as f64).sum::<f64>() / 10.0;
        assert!((weighted - r.average).abs() < 1e-12);

        let hi = build_report("psnr", &metrics(&vals), Quality::HigherIsBetter).unwrap();
        assert_eq!(hi.buckets[0].mean, 9.0);

        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
        assert!(build_report("rmse", &metrics(&vals[..9]), Quality::LowerIsBetter).is_err());
    }
}
