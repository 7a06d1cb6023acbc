mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use udfa::detcore::{BoxSet, DetectionSet, Detector, DetectorConfig};
use udfa::eval::{
    ap_per_threshold, average_precision, coco_thresholds, corrupt, evaluate, format_table, read_reports, write_reports, CorruptionKind, CorruptionSpec,
    EvalConfig,
};

fn perfect(gts: &[BoxSet]) -> Vec<DetectionSet> {
    gts.iter()
        .map(|g| DetectionSet {
            boxes: g.boxes.clone(),
            scores: (0..g.len()).map(|i| 0.9 - 0.01 * i as f32).collect(),
            labels: g.labels.clone(),
        })
        .collect()
}

fn instance(seed: u64) -> (Vec<DetectionSet>, Vec<BoxSet>) {
    let mut r = rng(seed);
    let gts: Vec<BoxSet> = (0..3).map(|_| random_boxes(&mut r, 3, 32, 32, 3)).collect();
    let dets = gts
        .iter()
        .map(|g| {
            let mut d = perfect(std::slice::from_ref(g)).remove(0);
            for b in d.boxes.iter_mut() {
                b[2] += r.random_range(0.0..3.0);
            }
            for s in d.scores.iter_mut() {
                *s = r.random_range(0.02..1.0);
            }
            d.boxes.push(random_boxes(&mut r, 1, 32, 32, 3).boxes[0]);
            d.scores.push(r.random_range(0.02..1.0));
            d.labels.push(r.random_range(0..3));
            d
        })
        .collect();
    (dets, gts)
}

proptest! {
    #[test]
    fn perfect_detections_score_100(seed in any::<u64>()) {
        let gts: Vec<BoxSet> = (0..3).map(|_| random_boxes(&mut rng(seed), 2, 32, 32, 4)).collect();
        let ap = average_precision(&perfect(&gts), &gts).unwrap();
        prop_assert_eq!((ap.ap, ap.ap50, ap.ap75), (100.0, 100.0, 100.0));
    }

    #[test]
    fn ap_ignores_detection_order_within_an_image(seed in any::<u64>()) {
        let (dets, gts) = instance(seed);
        let reversed: Vec<DetectionSet> = dets
            .iter()
            .map(|d| DetectionSet {
                boxes: d.boxes.iter().rev().copied().collect(),
                scores: d.scores.iter().rev().copied().collect(),
                labels: d.labels.iter().rev().copied().collect(),
            })
            .collect();
        prop_assert_eq!(average_precision(&dets, &gts).unwrap(), average_precision(&reversed, &gts).unwrap());
    }

    #[test]
    fn trailing_false_positives_and_unlabelled_classes_are_free(seed in any::<u64>()) {
        let (dets, gts) = instance(seed);
        let base = ap_per_threshold(&dets, &gts, &coco_thresholds()).unwrap();
        let mut more = dets.clone();
        // below every other score, and a class absent from the ground truth
        more[0].boxes.push([0.0, 0.0, 5.0, 5.0]);
        more[0].scores.push(0.015);
        more[0].labels.push(0);
        more[1].boxes.push([1.0, 1.0, 9.0, 9.0]);
        more[1].scores.push(0.99);
        more[1].labels.push(7);
        let after = ap_per_threshold(&more, &gts, &coco_thresholds()).unwrap();
        prop_assert_eq!(&base, &after);
        for (thr, v) in coco_thresholds().into_iter().zip(&base) {
            prop_assert!((v - oracle_ap(&dets, &gts, thr).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn corruptions_are_seeded_bounded_and_grow_with_severity() {
    let img = dataset(50, 1, 0).images.index_axis(ndarray::Axis(0), 0).to_owned();
    for kind in CorruptionKind::ALL {
        let mut prev = 0.0;
        for sev in 1..=5 {
            let spec = CorruptionSpec::new(kind, sev).unwrap();
            let a = corrupt(img.view(), &spec, 9).unwrap();
            assert_eq!(a, corrupt(img.view(), &spec, 9).unwrap());
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            let dist = (&a - &img).mapv(f32::abs).mean().unwrap();
            assert!(dist >= prev, "{kind:?} severity {sev}: {dist} < {prev}");
            prev = dist;
        }
        assert!(prev > 0.0, "{kind:?} never changes the image");
        assert_eq!(kind.name().parse::<CorruptionKind>().unwrap(), kind);
    }
    assert!(CorruptionSpec::new(CorruptionKind::Contrast, 6).is_err());
    assert!("snow".parse::<CorruptionKind>().is_err());
}

#[test]
fn evaluation_reports_are_reproducible_and_round_trip() {
    let data = dataset(51, 6, 0);
    let det = Detector::<f32>::new(DetectorConfig::default(), 51).unwrap();
    let cfg = EvalConfig {
        adv_steps: vec![1, 2],
        corruptions: vec![CorruptionKind::GaussianNoise, CorruptionKind::Pixelate],
        severities: vec![1, 5],
        ..EvalConfig::default()
    };
    let a = evaluate(&det, &data, &cfg, "X").unwrap();
    let b = evaluate(&det, &data, &cfg, "X").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.adv_per_step.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
    assert!(a.mpc.is_some());
    assert_eq!(a.corruptions, vec!["gaussian_noise", "pixelate"]);
    assert_eq!(a.dataset_hash, data.content_hash);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    write_reports(&path, std::slice::from_ref(&a)).unwrap();
    assert_eq!(read_reports(&path).unwrap(), vec![a.clone()]);
    assert!(format_table(&[a], None).unwrap().contains("mPC over: gaussian_noise, pixelate"));
}

#[test]
fn clean_only_evaluation_leaves_optional_fields_empty() {
    let data = dataset(52, 4, 0);
    let det = Detector::<f32>::new(DetectorConfig::default(), 52).unwrap();
    let cfg = EvalConfig { adv_steps: vec![], ..EvalConfig::default() };
    let r = evaluate(&det, &data, &cfg, "clean").unwrap();
    assert_eq!(r.adv_per_step, BTreeMap::new());
    assert!(r.adv_avg.is_none() && r.mpc.is_none());
    assert!(format_table(&[r], None).unwrap().contains(" - "));
}

#[test]
fn tables_refuse_incomparable_reports() {
    let data = dataset(53, 4, 0);
    let other = dataset(54, 4, 0);
    let det = Detector::<f32>::new(DetectorConfig::default(), 53).unwrap();
    let cfg = EvalConfig { adv_steps: vec![1], ..EvalConfig::default() };
    let a = evaluate(&det, &data, &cfg, "A").unwrap();
    let b = evaluate(&det, &other, &cfg, "B").unwrap();
    assert!(format_table(&[a.clone(), b], None).is_err());
    let c = evaluate(&det, &data, &EvalConfig { epsilon_255: 4.0, ..cfg.clone() }, "C").unwrap();
    assert!(format_table(&[a.clone(), c], None).is_err());
    assert!(format_table(&[a], Some("missing")).is_err());
}
