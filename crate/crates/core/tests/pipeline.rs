use stitchkit::align::{align_pair, align_with_offsets, PyramidConfig};
use stitchkit::datakit::{gen_synthetic_pair, load_dataset, procedural_source, write_synthetic_set, SynthParams};
use stitchkit::evalkit::{build_report, four_pt_rmse, Quality, SampleMetric};
use stitchkit::geometry::FourPointOffsets;
use stitchkit::losses::LossWeights;
use stitchkit::reconstruct::{build_model, reconstruct, train, BranchConfig, StitchModel, TrainConfig};

fn small_pyramid() -> PyramidConfig {
    PyramidConfig {
        levels: 2,
        iterations_per_level: 80,
        ..PyramidConfig::default()
    }
}

#[test]
fn align_then_reconstruct_fills_the_canvas() {
    let src = procedural_source(96, 96, 11);
    let pair = gen_synthetic_pair(&src, 6.0, 64, 11).unwrap();
    let aligned = align_pair(&pair.reference, &pair.target, &small_pyramid()).unwrap();
    assert!(!aligned.degenerate);
    assert!(four_pt_rmse(&aligned.offsets, &pair.truth) < 0.5 * four_pt_rmse(&FourPointOffsets::ZERO, &pair.truth));

    let model = build_model(&BranchConfig::default(), 11).unwrap();
    let canvas = aligned.canvas;
    let out = reconstruct(&model, aligned).unwrap();
    let s = out.s_hr.shape();
    assert_eq!((s.c, s.h, s.w), (3, canvas.height, canvas.width));
    assert_eq!(out.s_lr.shape().h, BranchConfig::default().lr_working_size.0);
    assert!(out.s_hr.all_finite() && out.l_cs.is_finite());
}

#[test]
fn synthetic_set_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let src = procedural_source(96, 96, 12);
    let params = SynthParams {
        source: "procedural".into(),
        count: 3,
        disturbance: 5.0,
        crop_size: 48,
        photometric_jitter: 0.0,
    };
    let manifest = write_synthetic_set(&src, &params, 12, dir.path()).unwrap();
    assert_eq!(manifest.records.len(), 3);
    let loaded = load_dataset(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded.len(), 3);
    for p in &loaded {
        let truth = p.record.truth_offsets.unwrap();
        let a = align_with_offsets(&p.reference, &p.target, &truth).unwrap();
        // 8-bit quantization of both images bounds the residual.
        assert!(a.final_loss < 0.02, "{}", a.final_loss);
    }
}

#[test]
fn trained_checkpoint_restores_the_same_outputs() {
    let src = procedural_source(96, 96, 13);
    let data: Vec<_> = (0..2)
        .map(|i| {
            let p = gen_synthetic_pair(&src, 4.0, 64, 13 + i).unwrap();
            align_with_offsets(&p.reference, &p.target, &p.truth).unwrap()
        })
        .collect();
    let cfg = BranchConfig::default();
    let mut model = build_model(&cfg, 13).unwrap();
    let tc = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let trace = train(&mut model, &data, &LossWeights::default(), &tc).unwrap();
    assert_eq!(trace.records.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let restored = StitchModel::load(&path, &cfg).unwrap();
    let a = reconstruct(&model, data[0].clone()).unwrap();
    let b = reconstruct(&restored, data[0].clone()).unwrap();
    assert_eq!(a.s_hr, b.s_hr);
    assert_eq!(a.s_lr, b.s_lr);
}

#[test]
fn report_buckets_cover_every_sample() {
    let samples: Vec<SampleMetric> = (0..17)
        .map(|i| SampleMetric {
            id: format!("p{i}"),
            value: ((i * 7) % 17) as f64,
        })
        .collect();
    let r = build_report("rmse", &samples, Quality::LowerIsBetter).unwrap();
    assert_eq!(r.buckets.iter().map(|b| b.count).sum::<usize>(), 17);
    assert!(r.to_csv().lines().count() > 3);
}
