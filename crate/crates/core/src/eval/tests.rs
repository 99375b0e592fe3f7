use super::*;
use proptest::prelude::*;

fn mask(w: usize, pixels: &[usize]) -> Mask {
    let mut m = Mask::filled(w, 1, false);
    pixels.iter().for_each(|&p| m.data[p] = true);
    m
}

fn det(id: usize, class: usize, score: f64, m: Mask) -> InstanceDetection {
    let empty = Mask::filled(m.width, m.height, false);
    InstanceDetection {
        instance_id: id,
        class_id: class,
        fg_mask: m,
        occ_mask: empty,
        score,
    }
}

fn gt(id: usize, class: usize, m: Mask, category: OcclusionCategory) -> GtInstance {
    GtInstance {
        instance_id: id,
        class_id: class,
        visible_mask: m.clone(),
        amodal_mask: m,
        category,
    }
}

fn image(key: usize, gts: Vec<GtInstance>, detections: Vec<InstanceDetection>) -> ImageEval {
    ImageEval {
        key,
        gts,
        detections,
    }
}

#[test]
fn iou_examples() {
    let a = mask(4, &[0, 1]);
    assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
    assert_eq!(mask_iou(&a, &mask(4, &[2, 3])).unwrap(), 0.0);
    assert_eq!(mask_iou(&a, &mask(4, &[1, 2])).unwrap(), 1.0 / 3.0);
    assert_eq!(mask_iou(&mask(4, &[]), &mask(4, &[])).unwrap(), 0.0);
    assert!(mask_iou(&a, &mask(3, &[0])).is_err());
}

#[test]
fn matching_examples() {
    let g = vec![gt(
        0,
        0,
        mask(10, &[0, 1, 2, 3, 4]),
        OcclusionCategory::None,
    )];
    // IoU 3/5 = 0.6.
    let d = det(0, 0, 1.0, mask(10, &[0, 1, 2]));
    let m = match_detections(&[d.clone()], &g, 0.5, IouMode::Amodal).unwrap();
    assert_eq!(m.detection_to_gt, vec![Some(0)]);

    let strong = det(1, 0, 0.9, mask(10, &[0, 1, 2, 3, 4]));
    let weak = det(2, 0, 0.1, mask(10, &[0, 1, 2, 3, 4]));
    let m = match_detections(&[weak, strong], &g, 0.5, IouMode::Amodal).unwrap();
    assert_eq!(m.detection_to_gt, vec![None, Some(0)]);
    assert_eq!(m.gt_to_detection, vec![Some(1)]);

    let wrong = det(0, 1, 1.0, mask(10, &[0, 1, 2, 3, 4]));
    let m = match_detections(&[wrong], &g, 0.5, IouMode::Amodal).unwrap();
    assert_eq!(m.detection_to_gt, vec![None]);
}

#[test]
fn matching_prefers_highest_iou() {
    let g = vec![
        gt(0, 0, mask(10, &[0, 1, 2, 3]), OcclusionCategory::None),
        gt(1, 0, mask(10, &[0, 1, 2]), OcclusionCategory::None),
    ];
    let d = det(0, 0, 1.0, mask(10, &[0, 1, 2]));
    let m = match_detections(&[d], &g, 0.5, IouMode::Amodal).unwrap();
    assert_eq!(m.detection_to_gt, vec![Some(1)]);
}

#[test]
fn visible_mode_uses_foreground_layer() {
    let mut g = gt(0, 0, mask(6, &[0, 1, 2, 3]), OcclusionCategory::Partial);
    g.visible_mask = mask(6, &[0, 1]);
    let mut d = det(0, 0, 1.0, mask(6, &[0, 1]));
    d.occ_mask = mask(6, &[2, 3]);
    let amodal = match_detections(&[d.clone()], &[g.clone()], 0.95, IouMode::Amodal).unwrap();
    let visible = match_detections(&[d], &[g], 0.95, IouMode::Visible).unwrap();
    assert_eq!(amodal.detection_to_gt, vec![Some(0)]);
    assert_eq!(visible.detection_to_gt, vec![Some(0)]);
}

fn perfect_images() -> Vec<ImageEval> {
    let cats = [
        OcclusionCategory::None,
        OcclusionCategory::Partial,
        OcclusionCategory::Heavy,
    ];
    (0..4)
        .map(|k| {
            let gts: Vec<GtInstance> = (0..3)
                .map(|i| gt(i, i % 2, mask(12, &[4 * i, 4 * i + 1, 4 * i + 2]), cats[i]))
                .collect();
            let dets = gts
                .iter()
                .map(|g| det(g.instance_id, g.class_id, 0.5, g.amodal_mask.clone()))
                .collect();
            image(k, gts, dets)
        })
        .collect()
}

#[test]
fn perfect_detections_score_one() {
    let r = evaluate_images(&perfect_images(), &EvalConfig::default()).unwrap();
    for (name, v) in r.metrics() {
        assert_eq!(v, Some(1.0), "{name}");
    }
    assert_eq!(
        r.gt_counts,
        CategoryCounts {
            none: 4,
            partial: 4,
            heavy: 4
        }
    );
}

#[test]
fn no_detections_score_zero() {
    let mut images = perfect_images();
    images.iter_mut().for_each(|im| im.detections.clear());
    let r = evaluate_images(&images, &EvalConfig::default()).unwrap();
    for (name, v) in r.metrics() {
        assert_eq!(v, Some(0.0), "{name}");
    }
}

#[test]
fn no_ground_truth_is_absent() {
    let images = vec![image(0, vec![], vec![det(0, 0, 1.0, mask(4, &[0]))])];
    let r = evaluate_images(&images, &EvalConfig::default()).unwrap();
    assert!(r.metrics().iter().all(|(_, v)| v.is_none()));
}

#[test]
fn empty_category_is_absent() {
    let images = vec![image(
        0,
        vec![gt(0, 0, mask(4, &[0, 1]), OcclusionCategory::None)],
        vec![det(0, 0, 1.0, mask(4, &[0, 1]))],
    )];
    let r = evaluate_images(&images, &EvalConfig::default()).unwrap();
    assert_eq!(r.ar_none, Some(1.0));
    assert_eq!(r.ar_partial, None);
    assert_eq!(r.ar_heavy, None);
}

#[test]
fn false_positive_ranked_first_halves_precision_tail() {
    // Ranking [FP, TP] with one GT: precision envelope is 1/2 everywhere.
    let g = vec![gt(0, 0, mask(4, &[0, 1]), OcclusionCategory::None)];
    let dets = vec![
        det(0, 0, 0.9, mask(4, &[2, 3])),
        det(1, 0, 0.1, mask(4, &[0, 1])),
    ];
    let r = evaluate_images(&[image(0, g, dets)], &EvalConfig::default()).unwrap();
    assert!((r.ap.unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(r.ar100, Some(1.0));
}

#[test]
fn max_detections_truncates() {
    let g = vec![gt(0, 0, mask(4, &[0, 1]), OcclusionCategory::None)];
    let dets = vec![
        det(0, 0, 0.9, mask(4, &[2, 3])),
        det(1, 0, 0.1, mask(4, &[0, 1])),
    ];
    let config = EvalConfig {
        max_detections: 1,
        ..EvalConfig::default()
    };
    let r = evaluate_images(&[image(0, g, dets)], &config).unwrap();
    assert_eq!(r.ar100, Some(0.0));
}

#[test]
fn config_validation() {
    let bad = |t: Vec<f64>| EvalConfig {
        iou_thresholds: t,
        ..EvalConfig::default()
    };
    assert!(bad(vec![]).validate().is_err());
    assert!(bad(vec![0.5, 0.5]).validate().is_err());
    assert!(bad(vec![0.0]).validate().is_err());
    assert!(bad(vec![0.5, 1.1]).validate().is_err());
    assert!(bad(vec![0.5, 1.0]).validate().is_ok());
    assert_eq!(EvalConfig::default().iou_thresholds.len(), 10);
}

#[test]
fn evaluate_checks_counts() {
    let cfg = crate::scenegen::SceneConfig {
        instances_per_class: 1,
        canvas_size: 64,
        label_size: 16,
        shape_scale: 10.0,
        ..Default::default()
    };
    let samples = crate::scenegen::generate_dataset(&cfg, 2).unwrap();
    let err = evaluate(&[], &samples, &EvalConfig::default()).unwrap_err();
    assert_eq!(err.kind(), "sample_count_mismatch");
}

#[test]
fn report_files() {
    let r = evaluate_images(&perfect_images(), &EvalConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.write_json(&dir.path().join("r.json")).unwrap();
    let back = EvalReport::read_json(&dir.path().join("r.json")).unwrap();
    assert_eq!(back.ap, r.ap);
    assert_eq!(back.per_class, r.per_class);
    r.write_csv(&dir.path().join("r.csv")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(csv.starts_with("metric,value\nap,1.000000\n"));
    r.write_pr_csv(&dir.path().join("pr.csv")).unwrap();
    let pr = std::fs::read_to_string(dir.path().join("pr.csv")).unwrap();
    assert_eq!(pr.lines().count(), 1 + 2 * 10 * 101);
}

#[test]
fn ari_known_values() {
    assert_eq!(
        adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(),
        1.0
    );
    let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap();
    assert!((v - 4.0 / 7.0).abs() < 1e-12);
    let v = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 1, 2, 0, 1, 2]).unwrap();
    assert!((v + 4.0 / 11.0).abs() < 1e-12, "{v}");
    assert_eq!(adjusted_rand_index(&[3, 3, 3], &[1, 1, 1]).unwrap(), 1.0);
    assert!(adjusted_rand_index(&[0], &[0, 1]).is_err());
}

/// Random small problem on an 8-pixel strip.
fn random_images(seed: u64) -> Vec<ImageEval> {
    use rand::RngExt;
    let mut rng = crate::rng::stream(seed);
    let cats = [
        OcclusionCategory::None,
        OcclusionCategory::Partial,
        OcclusionCategory::Heavy,
    ];
    let rand_mask = |rng: &mut rand_pcg::Pcg64| {
        let mut m = Mask::filled(8, 1, false);
        m.data.iter_mut().for_each(|b| *b = rng.random_bool(0.5));
        m.data[rng.random_range(0..8)] = true;
        m
    };
    (0..3)
        .map(|k| {
            let gts = (0..rng.random_range(0..4))
                .map(|i| {
                    let c = rng.random_range(0..2);
                    gt(i, c, rand_mask(&mut rng), cats[rng.random_range(0..3)])
                })
                .collect();
            let dets = (0..rng.random_range(0..4))
                .map(|i| {
                    let c = rng.random_range(0..2);
                    let s = rng.random_range(0.01..1.0);
                    det(i, c, s, rand_mask(&mut rng))
                })
                .collect();
            image(k, gts, dets)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_scale_invariance(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let images = random_images(seed);
        let mut scaled = images.clone();
        scaled.iter_mut().flat_map(|im| &mut im.detections).for_each(|d| d.score *= scale);
        let cfg = EvalConfig::default();
        let a = evaluate_images(&images, &cfg).unwrap();
        let b = evaluate_images(&scaled, &cfg).unwrap();
        prop_assert_eq!(a.metrics(), b.metrics());
    }

    #[test]
    fn order_independence(seed in any::<u64>()) {
        let images = random_images(seed);
        let mut shuffled = images.clone();
        shuffled.reverse();
        shuffled.iter_mut().for_each(|im| im.detections.reverse());
        let cfg = EvalConfig::default();
        prop_assert_eq!(evaluate_images(&images, &cfg).unwrap(), evaluate_images(&shuffled, &cfg).unwrap());
    }

    #[test]
    fn removing_false_positive_never_lowers_ap(seed in any::<u64>()) {
        let cfg = EvalConfig { iou_thresholds: vec![0.5], ..EvalConfig::default() };
        let images = random_images(seed);
        let base = evaluate_images(&images, &cfg).unwrap();
        let m = images.iter().map(|im| match_detections(&im.detections, &im.gts, 0.5, IouMode::Amodal).unwrap()).collect::<Vec<_>>();
        for (i, mi) in m.iter().enumerate() {
            if let Some(d) = mi.detection_to_gt.iter().position(Option::is_none) {
                let mut fewer = images.clone();
                fewer[i].detections.remove(d);
                let r = evaluate_images(&fewer, &cfg).unwrap();
                if let (Some(a), Some(b)) = (base.ap, r.ap) {
                    prop_assert!(b >= a - 1e-12);
                }
            }
        }
    }

    #[test]
    fn adding_perfect_detection_never_lowers(seed in any::<u64>(), score in 0.0f64..1.0) {
        let cfg = EvalConfig::default();
        let images = random_images(seed);
        let base = evaluate_images(&images, &cfg).unwrap();
        for i in 0..images.len() {
            // A GT left unmatched at every threshold.
            let unmatched = (0..images[i].gts.len()).find(|&g| {
                cfg.iou_thresholds.iter().all(|&t| {
                    match_detections(&images[i].detections, &images[i].gts, t, IouMode::Amodal)
                        .unwrap()
                        .gt_to_detection[g]
                        .is_none()
                })
            });
            if let Some(g) = unmatched {
                // Keep the new detection unambiguous: no other same-class GT
                // is within matching range of its mask.
                let mut more = images.clone();
                let gi = more[i].gts[g].clone();
                if more[i].gts.iter().enumerate().any(|(j, o)| {
                    j != g && o.class_id == gi.class_id && mask_iou(&o.amodal_mask, &gi.amodal_mask).unwrap() >= 0.5
                }) {
                    continue;
                }
                more[i].detections.push(det(100, gi.class_id, score, gi.amodal_mask.clone()));
                let r = evaluate_images(&more, &cfg).unwrap();
                prop_assert!(r.ar100.unwrap() >= base.ar100.unwrap() - 1e-12);
                prop_assert!(r.ap.unwrap() >= base.ap.unwrap() - 1e-12);
            }
        }
    }

    #[test]
    fn single_category_stratified_equals_overall(seed in any::<u64>()) {
        let mut images = random_images(seed);
        images.iter_mut().flat_map(|im| &mut im.gts).for_each(|g| g.category = OcclusionCategory::Heavy);
        let r = evaluate_images(&images, &EvalConfig::default()).unwrap();
        prop_assert_eq!(r.ar_heavy, r.ar100);
        if let (Some(ap), Some(ap50)) = (r.ap, r.ap50) {
            prop_assert!(ap <= ap50 + 1e-12);
        }
    }
}
