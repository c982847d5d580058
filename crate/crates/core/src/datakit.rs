//! Synthetic pair generation, dataset manifests and image IO.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ExtendedColorType, ImageEncoder};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::evalkit::{classify_overlap, OverlapLevel, ParallaxLevel};
use crate::geometry::{canvas_extent, solve_dlt, FourPointOffsets, Homography};
use crate::tensorcore::{Shape4, Tensor4};
use crate::warpmask::{bilinear_sample, content_mask, overlap_rate};
use crate::{rng, Error, Result};

/// Decode any PNG/JPEG into a 1x3xHxW tensor in [0,1].
pub fn load_image(path: &Path) -> Result<Tensor4> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor4::from_fn(Shape4::new(1, 3, h, w), |_, c, y, x| {
        f64::from(raw[(y * w + x) * 3 + c]) / 255.0
    }))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Encode a 1- or 3-channel image as 8-bit PNG. Values are clamped to [0,1]
/// and quantized with ties to even.
pub fn save_image(t: &Tensor4, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || !(s.c == 1 || s.c == 3) {
        return Err(Error::shape("save_image", format!("expected 1x1xHxW or 1x3xHxW, got {s}")));
    }
    let mut buf = Vec::with_capacity(s.len());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                buf.push(quantize(t.get(0, c, y, x)));
            }
        }
    }
    let color = if s.c == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    image::codecs::png::PngEncoder::new(file)
        .write_image(&buf, s.w as u32, s.h as u32, color)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Smooth multi-orientation colour texture: a sum of seeded plane waves
/// with wavelengths between 24 and 96 px plus a few soft blobs.
pub fn procedural_source(width: usize, height: usize, seed: u64) -> Tensor4 {
    let mut rng = rng::stream(seed, "source", 0);
    struct Wave {
        kx: f64,
        ky: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..10)
        .map(|_| {
            let lambda = rng.random_range(24.0..96.0);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / lambda;
            Wave {
                kx: k * theta.cos(),
                ky: k * theta.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                amp: [0.0; 3].map(|_: f64| rng.random_range(0.01..0.04)),
            }
        })
        .collect();
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..width as f64),
                rng.random_range(0.0..height as f64),
                rng.random_range(10.0..30.0),
                [0.0; 3].map(|_: f64| rng.random_range(-0.15..0.15)),
            )
        })
        .collect();
    Tensor4::from_fn(Shape4::new(1, 3, height, width), |_, c, y, x| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut v = 0.5;
        for w in &waves {
            v += w.amp[c] * (w.kx * px + w.ky * py + w.phase).sin();
        }
        for (bx, by, r, a) in &blobs {
            let d2 = (px - bx).powi(2) + (py - by).powi(2);
            v += a[c] * (-d2 / (2.0 * r * r)).exp();
        }
        v.clamp(0.0, 1.0)
    })
}

/// An in-memory synthetic pair with known aligning offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub reference: Tensor4,
    pub target: Tensor4,
    pub truth: FourPointOffsets,
    /// Top-left corner of the reference crop inside the source.
    pub crop_origin: (usize, usize),
}

/// Render `target(q) = source(origin + H(q))` for `H = solve_dlt(truth)`, so
/// that warping the target by `H` reproduces the reference crop.
pub fn render_pair(source: &Tensor4, crop_origin: (usize, usize), crop_size: usize, truth: &FourPointOffsets) -> Result<SyntheticPair> {
    let s = source.shape();
    if s.n != 1 {
        return Err(Error::shape("render_pair", format!("expected a single image, got {s}")));
    }
    if crop_origin.0 + crop_size > s.w || crop_origin.1 + crop_size > s.h {
        return Err(Error::TooSmall(format!(
            "crop {crop_size} at {crop_origin:?} does not fit in a {}x{} source",
            s.w, s.h
        )));
    }
    let (ox, oy) = crop_origin;
    let shape = s.with_spatial(crop_size, crop_size);
    let reference = Tensor4::from_fn(shape, |n, c, y, x| source.get(n, c, oy + y, ox + x));
    let h = if truth.max_abs() == 0.0 {
        Homography::IDENTITY
    } else {
        solve_dlt(truth, (crop_size, crop_size))?
    };
    let mut target = Tensor4::zeros(shape);
    for y in 0..crop_size {
        for x in 0..crop_size {
            let (u, v) = h.apply(x as f64 + 0.5, y as f64 + 0.5)?;
            let (u, v) = (u + ox as f64 - 0.5, v + oy as f64 - 0.5);
            for c in 0..s.c {
                let val = bilinear_sample(source.plane(0, c), s.w, s.h, u, v);
                target.set(0, c, y, x, val);
            }
        }
    }
    Ok(SyntheticPair {
        reference,
        target,
        truth: *truth,
        crop_origin,
    })
}

/// Draw uniform corner offsets in `[-d, d]` and a crop position that keeps
/// every displaced corner inside the source, then render the pair.
pub fn gen_synthetic_pair(source: &Tensor4, disturbance: f64, crop_size: usize, seed: u64) -> Result<SyntheticPair> {
    if !(disturbance >= 0.0 && disturbance.is_finite()) {
        return Err(Error::OutOfRange(format!("disturbance {disturbance}")));
    }
    let s = source.shape();
    let margin = disturbance.ceil() as usize;
    let need = crop_size + 2 * margin;
    if s.w < need || s.h < need {
        return Err(Error::TooSmall(format!(
            "source {}x{} is smaller than crop {crop_size} plus a {margin} px margin on each side",
            s.w, s.h
        )));
    }
    let mut rng = rng::stream(seed, "pair", 0);
    let ox = rng.random_range(margin..=s.w - crop_size - margin);
    let oy = rng.random_range(margin..=s.h - crop_size - margin);
    let mut flat = [0.0; 8];
    if disturbance > 0.0 {
        for v in &mut flat {
            *v = rng.random_range(-disturbance..=disturbance);
        }
    }
    render_pair(source, (ox, oy), crop_size, &FourPointOffsets::from_flat(flat))
}

/// Overlap of the warped target with the reference, as a fraction of the
/// reference area, under the given offsets.
pub fn truth_overlap(truth: &FourPointOffsets, size: (usize, usize)) -> Result<f64> {
    let canvas = canvas_extent(truth, size)?;
    let a = content_mask(&Homography::IDENTITY, &canvas, size)?;
    let b = content_mask(&solve_dlt(truth, size)?, &canvas, size)?;
    overlap_rate(&a, &b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub ref_path: PathBuf,
    pub target_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_offsets: Option<FourPointOffsets>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_level: Option<OverlapLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallax_level: Option<ParallaxLevel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub source: String,
    pub count: usize,
    pub disturbance: f64,
    pub crop_size: usize,
    #[serde(default)]
    pub photometric_jitter: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<PairRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthParams>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.id) {
                return Err(Error::Record {
                    id: r.id.clone(),
                    detail: "duplicate id".into(),
                });
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// Per-image gain and bias drawn from `[1-j, 1+j]` and `[-j/2, j/2]`.
fn jitter(t: &Tensor4, j: f64, seed: u64, index: u64) -> Tensor4 {
    let mut rng = rng::stream(seed, "jitter", index);
    let gain = rng.random_range(1.0 - j..=1.0 + j);
    let bias = rng.random_range(-j / 2.0..=j / 2.0);
    t.map(|v| (gain * v + bias).clamp(0.0, 1.0))
}

/// Generate `params.count` pairs from one source image into `out_dir`
/// (`ref_XXXX.png`, `tgt_XXXX.png`, `manifest.json`).
pub fn write_synthetic_set(source: &Tensor4, params: &SynthParams, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir)?;
    let mut records = Vec::with_capacity(params.count);
    for i in 0..params.count {
        let pair = gen_synthetic_pair(source, params.disturbance, params.crop_size, rng::derive_seed(seed, "pair", i as u64))?;
        let target = if params.photometric_jitter > 0.0 {
            jitter(&pair.target, params.photometric_jitter, seed, i as u64)
        } else {
            pair.target
        };
        let id = format!("{i:04}");
        let ref_path = PathBuf::from(format!("ref_{id}.png"));
        let target_path = PathBuf::from(format!("tgt_{id}.png"));
        save_image(&pair.reference, &out_dir.join(&ref_path))?;
        save_image(&target, &out_dir.join(&target_path))?;
        let rate = truth_overlap(&pair.truth, (params.crop_size, params.crop_size))?;
        records.push(PairRecord {
            id,
            ref_path,
            target_path,
            truth_offsets: Some(pair.truth),
            overlap_level: Some(classify_overlap(rate)?),
            parallax_level: Some(ParallaxLevel::Small),
        });
    }
    let manifest = DatasetManifest {
        records,
        seed: Some(seed),
        synthetic: Some(params.clone()),
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Build a manifest from sibling `reference/` and `target/` directories whose
/// files are paired by name.
pub fn ingest_directory(root: &Path) -> Result<DatasetManifest> {
    let list = |sub: &str| -> Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in fs::read_dir(root.join(sub))? {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        Ok(names)
    };
    let refs = list("reference")?;
    let targets: HashSet<String> = list("target")?.into_iter().collect();
    let mut records = Vec::new();
    for name in refs {
        if !targets.contains(&name) {
            return Err(Error::Record {
                id: name,
                detail: "no matching file in target/".into(),
            });
        }
        let id = Path::new(&name)
            .file_stem()
            .map_or_else(|| name.clone(), |s| s.to_string_lossy().into_owned());
        records.push(PairRecord {
            id,
            ref_path: Path::new("reference").join(&name),
            target_path: Path::new("target").join(&name),
            truth_offsets: None,
            overlap_level: None,
            parallax_level: None,
        });
    }
    let m = DatasetManifest {
        records,
        seed: None,
        synthetic: None,
    };
    m.validate()?;
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub record: PairRecord,
    pub reference: Tensor4,
    pub target: Tensor4,
}

/// Decode every record of a manifest; relative paths resolve against the
/// manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<LoadedPair>> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .records
        .into_iter()
        .map(|record| {
            let load = |p: &Path| {
                let full = base.join(p);
                if !full.exists() {
                    return Err(Error::Record {
                        id: record.id.clone(),
                        detail: format!("missing file {}", full.display()),
                    });
                }
                load_image(&full).map_err(|e| Error::Record {
                    id: record.id.clone(),
                    detail: e.to_string(),
                })
            };
            let reference = load(&record.ref_path)?;
            let target = load(&record.target_path)?;
            if reference.shape() != target.shape() {
                return Err(Error::Record {
                    id: record.id.clone(),
                    detail: format!("size mismatch: {} vs {}", reference.shape(), target.shape()),
                });
            }
            Ok(LoadedPair {
                record,
                reference,
                target,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ablation_loss;

    #[test]
    fn zero_disturbance_is_an_exact_crop() {
        let src = procedural_source(96, 96, 1);
        let p = gen_synthetic_pair(&src, 0.0, 64, 3).unwrap();
        assert_eq!(p.reference, p.target);
        assert_eq!(p.truth, FourPointOffsets::ZERO);
    }

    #[test]
    fn truth_offsets_align_the_pair() {
        let src = procedural_source(200, 200, 2);
        for seed in 0..4 {
            let p = gen_synthetic_pair(&src, 32.0, 128, seed).unwrap();
            let h = solve_dlt(&p.truth, (128, 128)).unwrap();
            let l = ablation_loss(&p.reference, &p.target, &h).unwrap();
            assert!(l.value < 1e-3, "seed {seed}: {}", l.value);
            let id = ablation_loss(&p.reference, &p.target, &Homography::IDENTITY).unwrap();
            assert!(id.value > l.value);
        }
    }

    #[test]
    fn source_too_small() {
        let src = procedural_source(100, 100, 3);
        assert!(matches!(gen_synthetic_pair(&src, 32.0, 64, 0), Err(Error::TooSmall(_))));
    }

    #[test]
    fn png_round_trip_and_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let img = procedural_source(20, 12, 4);
        let p = dir.path().join("a.png");
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
        let bytes = fs::read(&p).unwrap();
        save_image(&img, &p).unwrap();
        assert_eq!(bytes, fs::read(&p).unwrap());

        let white = Tensor4::filled(Shape4::new(1, 3, 4, 4), 1.0);
        save_image(&white, &p).unwrap();
        assert!(load_image(&p).unwrap().data().iter().all(|&v| v == 1.0));
        save_image(&Tensor4::zeros(Shape4::new(1, 1, 4, 4)), &p).unwrap();
        assert!(load_image(&p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn manifest_reproducible_and_loadable() {
        let src = procedural_source(96, 96, 5);
        let params = SynthParams {
            source: "procedural".into(),
            count: 3,
            disturbance: 8.0,
            crop_size: 64,
            photometric_jitter: 0.0,
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = write_synthetic_set(&src, &params, 11, d1.path()).unwrap();
        let m2 = write_synthetic_set(&src, &params, 11, d2.path()).unwrap();
        assert_eq!(m1, m2);
        for f in ["manifest.json", "ref_0001.png", "tgt_0002.png"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap());
        }
        let pairs = load_dataset(&d1.path().join("manifest.json")).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0].reference.shape(), Shape4::new(1, 3, 64, 64));

        fs::remove_file(d1.path().join("tgt_0001.png")).unwrap();
        match load_dataset(&d1.path().join("manifest.json")) {
            Err(Error::Record { id, .. }) => assert_eq!(id, "0001"),
            other => panic!("expected a record error, got {other:?}"),
        }
    }

    #[test]
    fn empty_manifest_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        DatasetManifest::default().write(&p).unwrap();
        assert!(load_dataset(&p).unwrap().is_empty());
    }

    #[test]
    fn ingest_pairs_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor4::filled(Shape4::new(1, 3, 4, 4), 0.5);
        for sub in ["reference", "target"] {
            for name in ["b.png", "a.png"] {
                save_image(&img, &dir.path().join(sub).join(name)).unwrap();
            }
        }
        let m = ingest_directory(dir.path()).unwrap();
        let ids: Vec<_> = m.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }
}
