use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::geometry::BBox;
use crate::schema::{Background, DatasetBuilder, Distance, Lighting, Motion};
use crate::splits::TargetRef;

const BRIGHT: (Distance, Motion, Background, Lighting) =
    (Distance::Near, Motion::Horizontal, Background::Simple, Lighting::Bright);
const DIM: (Distance, Motion, Background, Lighting) =
    (Distance::Far, Motion::Vertical, Background::Busy, Lighting::Dim);

fn pred(image_id: u64, label: u64, bbox: BBox, score: f64) -> Prediction {
    Prediction {
        image_id,
        label,
        bbox,
        score,
    }
}

fn at50() -> EvalConfig {
    EvalConfig {
        iou_thresholds: vec![0.5],
        ..EvalConfig::default()
    }
}

fn gated(second_image_negs: &[u64]) -> Dataset {
    DatasetBuilder::new()
        .category(1, "mug")
        .video(1, 1, 1, BRIGHT)
        .image(1, 1, 100, 100, &[])
        .image(2, 1, 100, 100, second_image_negs)
        .annotation(1, 1, 1, Some(1), BBox::new(0.0, 0.0, 10.0, 10.0))
        .build()
        .unwrap()
}

fn gating_preds() -> Vec<Prediction> {
    vec![
        // IoU 0.6
        pred(1, 1, BBox::new(0.0, 0.0, 10.0, 6.0), 0.9),
        pred(2, 1, BBox::new(40.0, 40.0, 10.0, 10.0), 0.95),
    ]
}

#[test]
fn default_thresholds() {
    let t = default_iou_thresholds();
    assert_eq!(t.len(), 10);
    assert_eq!(t[0], 0.5);
    assert_eq!(t[5], 0.75);
    assert_eq!(t[9], 0.95);
    assert!(EvalConfig::default().validate().is_ok());
}

#[test]
fn config_rejects_bad_thresholds() {
    for bad in [vec![], vec![0.5, 0.5], vec![0.6, 0.5], vec![0.0], vec![1.2]] {
        let cfg = EvalConfig {
            iou_thresholds: bad,
            ..EvalConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().code(), "INVALID_CONFIG");
    }
}

#[test]
fn prediction_on_unlisted_image_is_ignored() {
    let r = federated_ap_category(&gated(&[]), &gating_preds(), &at50(), &Exec::Sequential).unwrap();
    assert_eq!(r.ap50, Some(1.0));
    assert_eq!(r.ap, 1.0);
}

#[test]
fn prediction_on_negative_image_is_penalized() {
    let r = federated_ap_category(&gated(&[1]), &gating_preds(), &at50(), &Exec::Sequential).unwrap();
    assert_eq!(r.ap50, Some(0.5));
}

#[test]
fn no_predictions_gives_zero() {
    let r = federated_ap_category(&gated(&[1]), &[], &EvalConfig::default(), &Exec::Sequential).unwrap();
    assert_eq!(r.ap, 0.0);
    assert_eq!(r.ap50, Some(0.0));
    assert_eq!(r.ap75, Some(0.0));
}

#[test]
fn iou_06_fails_at_075() {
    let r = federated_ap_category(&gated(&[]), &gating_preds(), &EvalConfig::default(), &Exec::Sequential).unwrap();
    assert_eq!(r.ap50, Some(1.0));
    assert_eq!(r.ap75, Some(0.0));
    // passes 0.50 and 0.55 and 0.60 of ten thresholds
    assert!((r.ap - 0.3).abs() < 1e-15);
}

#[test]
fn no_ground_truth_is_an_error() {
    let d = DatasetBuilder::new()
        .category(1, "mug")
        .video(1, 1, 1, BRIGHT)
        .image(1, 1, 100, 100, &[1])
        .build()
        .unwrap();
    let e = federated_ap_category(&d, &[], &at50(), &Exec::Sequential).unwrap_err();
    assert_eq!(e.code(), "NO_GROUND_TRUTH");
}

#[test]
fn unknown_category_is_rejected() {
    let p = vec![pred(1, 9, BBox::new(0.0, 0.0, 1.0, 1.0), 0.5)];
    let e = federated_ap_category(&gated(&[]), &p, &at50(), &Exec::Sequential).unwrap_err();
    assert_eq!(e.code(), "UNKNOWN_LABEL");
}

fn instance_fixture() -> (Dataset, SplitSpec) {
    let d = DatasetBuilder::new()
        .category(1, "mug")
        .category(2, "shoe")
        .video(1, 1, 1, BRIGHT)
        .image(10, 1, 100, 100, &[])
        .image(1, 1, 100, 100, &[])
        .image(2, 1, 100, 100, &[])
        .image(3, 1, 100, 100, &[])
        .annotation(100, 10, 1, Some(1), BBox::new(0.0, 0.0, 30.0, 30.0))
        .annotation(1, 1, 1, Some(1), BBox::new(0.0, 0.0, 10.0, 10.0))
        .annotation(2, 2, 1, Some(1), BBox::new(20.0, 20.0, 10.0, 10.0))
        .annotation(3, 3, 2, Some(2), BBox::new(50.0, 50.0, 10.0, 10.0))
        .build()
        .unwrap();
    let spec = SplitSpec {
        train_images: vec![],
        val_images: vec![1, 2],
        test_images: vec![3],
        targets: vec![TargetRef {
            instance_id: 1,
            image_id: 10,
            annotation_id: 100,
        }],
        unseen_instance_ids: vec![],
    };
    (d, spec)
}

#[test]
fn instance_perfect_detection() {
    let (d, spec) = instance_fixture();
    let p = vec![
        pred(1, 1, BBox::new(0.0, 0.0, 10.0, 10.0), 0.8),
        pred(2, 1, BBox::new(20.0, 20.0, 10.0, 10.0), 0.7),
    ];
    let r = instance_ap(&d, &p, &spec, &at50(), &Exec::Sequential).unwrap();
    assert_eq!(r.ap50, Some(1.0));
    assert_eq!(r.num_units, 1);
    // the reference image is outside the evaluation set
    assert_eq!(r.per_unit[0].num_gt, 2);
}

#[test]
fn instance_false_alarm_on_absent_image() {
    let (d, spec) = instance_fixture();
    let p = vec![
        pred(1, 1, BBox::new(0.0, 0.0, 10.0, 10.0), 0.8),
        pred(2, 1, BBox::new(20.0, 20.0, 10.0, 10.0), 0.7),
        pred(3, 1, BBox::new(50.0, 50.0, 10.0, 10.0), 0.9),
    ];
    let r = instance_ap(&d, &p, &spec, &at50(), &Exec::Sequential).unwrap();
    let expected = 2.0 / 3.0;
    assert!((r.ap50.unwrap() - expected).abs() < 1e-15);
    let oracle = brute_force_ap_oracle(
        &[
            (1, BBox::new(0.0, 0.0, 10.0, 10.0)),
            (2, BBox::new(20.0, 20.0, 10.0, 10.0)),
        ],
        &p.iter().map(|p| (p.image_id, p.bbox, p.score)).collect::<Vec<_>>(),
        0.5,
    );
    assert_eq!(r.ap50.unwrap(), oracle);
}

#[test]
fn instance_label_outside_registry() {
    let (d, spec) = instance_fixture();
    let p = vec![pred(3, 2, BBox::new(50.0, 50.0, 10.0, 10.0), 0.9)];
    let e = instance_ap(&d, &p, &spec, &at50(), &Exec::Sequential).unwrap_err();
    assert_eq!(e.code(), "UNKNOWN_LABEL");
}

#[test]
fn unseen_bucket_only() {
    let (d, mut spec) = instance_fixture();
    spec.targets.push(TargetRef {
        instance_id: 2,
        image_id: 10,
        annotation_id: 100,
    });
    spec.unseen_instance_ids = vec![1, 2];
    let p = vec![
        pred(1, 1, BBox::new(0.0, 0.0, 10.0, 10.0), 0.8),
        pred(2, 1, BBox::new(20.0, 20.0, 10.0, 10.0), 0.7),
    ];
    let r = instance_ap(&d, &p, &spec, &at50(), &Exec::Sequential).unwrap();
    assert_eq!(r.ap50_unseen, Some(0.5));
    assert_eq!(r.ap50_seen, None);
    let json = r.to_json();
    assert!(json.contains("\"AP50_unseen\""));
    assert!(!json.contains("AP50_seen"));
}

#[test]
fn all_bright_buckets() {
    let cfg = EvalConfig {
        buckets: true,
        ..at50()
    };
    let r = federated_ap_category(&gated(&[1]), &gating_preds(), &cfg, &Exec::Sequential).unwrap();
    let b = r.buckets.unwrap();
    assert_eq!(b.ap50_dim, None);
    assert_eq!(b.ap50_bright, r.ap50);
    assert_eq!(b.ap50_busy, None);
    assert_eq!(b.ap50_simple, r.ap50);
}

#[test]
fn large_object_bucket() {
    let d = DatasetBuilder::new()
        .category(1, "mug")
        .video(1, 1, 1, BRIGHT)
        .image(1, 1, 200, 100, &[])
        .annotation(1, 1, 1, Some(1), BBox::new(10.0, 10.0, 35.0, 20.0))
        .build()
        .unwrap();
    let p = vec![pred(1, 1, BBox::new(10.0, 10.0, 35.0, 20.0), 0.9)];
    let b = bucket_breakdown(&d, &p, &at50(), &Exec::Sequential).unwrap();
    assert_eq!(b.ap50_l, Some(1.0));
    assert_eq!((b.ap50_s, b.ap50_m), (None, None));
}

#[test]
fn size_edges() {
    let s = SizeThresholds::default();
    assert_eq!(s.bucket(0.1999), SizeBucket::S);
    assert_eq!(s.bucket(0.20), SizeBucket::M);
    assert_eq!(s.bucket(0.30), SizeBucket::M);
    assert_eq!(s.bucket(0.3001), SizeBucket::L);
}

#[test]
fn size_bucket_drops_other_sizes() {
    // one small and one large object; the small one is missed and the large
    // one detected, plus a small false positive elsewhere
    let d = DatasetBuilder::new()
        .category(1, "mug")
        .video(1, 1, 1, BRIGHT)
        .image(1, 1, 100, 100, &[])
        .annotation(1, 1, 1, Some(1), BBox::new(0.0, 0.0, 10.0, 10.0))
        .annotation(2, 1, 1, Some(2), BBox::new(50.0, 50.0, 40.0, 40.0))
        .build()
        .unwrap();
    let p = vec![
        pred(1, 1, BBox::new(50.0, 50.0, 40.0, 40.0), 0.9),
        pred(1, 1, BBox::new(30.0, 0.0, 5.0, 5.0), 0.95),
    ];
    let b = bucket_breakdown(&d, &p, &at50(), &Exec::Sequential).unwrap();
    assert_eq!(b.ap50_l, Some(1.0));
    assert_eq!(b.ap50_s, Some(0.0));
    assert_eq!(b.ap50_m, None);
}

#[test]
fn mixed_lighting_matches_oracle() {
    let bx = |i: u64| BBox::new(10.0 * i as f64, 0.0, 10.0, 10.0);
    let mut b = DatasetBuilder::new()
        .category(1, "mug")
        .video(1, 1, 1, BRIGHT)
        .video(2, 1, 1, DIM);
    for img in 1..=4u64 {
        let vid = if img <= 2 { 1 } else { 2 };
        b = b
            .image(img, vid, 100, 100, &[])
            .annotation(img, img, 1, Some(1), bx(img));
    }
    b = b.annotation(5, 4, 1, Some(1), bx(6));
    let d = b.build().unwrap();
    let p = vec![
        pred(1, 1, bx(1), 0.9),
        pred(2, 1, bx(2), 0.8),
        pred(3, 1, bx(3), 0.7),
        pred(4, 1, bx(4), 0.6),
        pred(4, 1, bx(8), 0.65),
    ];
    let r = bucket_breakdown(&d, &p, &at50(), &Exec::Sequential).unwrap();
    assert_eq!(r.ap50_bright, Some(1.0));
    let gts: Vec<(u64, BBox)> = [(3, bx(3)), (4, bx(4)), (4, bx(6))].into();
    let dets: Vec<(u64, BBox, f64)> = p[2..].iter().map(|p| (p.image_id, p.bbox, p.score)).collect();
    let oracle = brute_force_ap_oracle(&gts, &dets, 0.5);
    assert_eq!(r.ap50_dim, Some(oracle));
    assert!(oracle < 1.0);
}

#[test]
fn missing_metadata_gives_absent_bucket() {
    let mut file = gated(&[]).into_file();
    file.videos[0].lighting = None;
    let d = Dataset::from_file(file).unwrap();
    let b = bucket_breakdown(&d, &gating_preds(), &at50(), &Exec::Sequential).unwrap();
    assert_eq!((b.ap50_bright, b.ap50_dim), (None, None));
    assert_eq!(b.ap50_simple, Some(1.0));
}

#[test]
fn max_dets_truncates_per_image() {
    let d = gated(&[]);
    let p = vec![
        pred(1, 1, BBox::new(60.0, 60.0, 10.0, 10.0), 0.99),
        pred(1, 1, BBox::new(0.0, 0.0, 10.0, 10.0), 0.5),
    ];
    let capped = EvalConfig {
        max_dets: Some(1),
        ..at50()
    };
    assert_eq!(
        federated_ap_category(&d, &p, &capped, &Exec::Sequential).unwrap().ap50,
        Some(0.0)
    );
    assert_eq!(
        federated_ap_category(&d, &p, &at50(), &Exec::Sequential).unwrap().ap50,
        Some(0.5)
    );
}

#[test]
fn image_subset_restricts_evaluation() {
    let cfg = EvalConfig {
        image_subset: Some(BTreeSet::from([1])),
        ..at50()
    };
    let r = federated_ap_category(&gated(&[1]), &gating_preds(), &cfg, &Exec::Sequential).unwrap();
    assert_eq!(r.ap50, Some(1.0));
}

const CL_ROWS: [([f64; 5], f64); 6] = [
    ([23.3, 39.5, 54.6, 70.2, 85.6], 54.64),
    ([15.1, 30.4, 45.5, 60.8, 75.4], 45.44),
    ([14.7, 29.1, 42.3, 55.4, 66.9], 41.68),
    ([30.6, 47.2, 58.1, 67.5, 76.2], 55.92),
    ([28.4, 44.7, 57.6, 67.9, 78.2], 55.36),
    ([19.5, 34.5, 43.9, 52.7, 61.5], 42.42),
];

#[test]
fn eap_arithmetic() {
    for (row, mean) in CL_ROWS {
        assert!((eap(&row).unwrap() - mean).abs() < 1e-9, "{row:?}");
    }
    assert_eq!(eap(&[]), None);
    assert_eq!(eap(&[42.0; 7]), Some(42.0));
}

fn precomputed_stream(maps: &[f64]) -> ExperienceStream {
    ExperienceStream {
        mode: StreamMode::ClassIncrementalInstance,
        experiences: maps
            .iter()
            .enumerate()
            .map(|(i, m)| Experience {
                instance_ids: vec![i as u64],
                map: Some(*m),
                ..Experience::default()
            })
            .collect(),
        test_image_ids: vec![],
        dataset: None,
        splits: None,
    }
}

#[test]
fn cl_with_precomputed_maps() {
    let s = precomputed_stream(&CL_ROWS[3].0);
    let r = cl_evaluate(&s, &[], None, None, &EvalConfig::default(), &Exec::Sequential).unwrap();
    assert!((r.eap - 55.92).abs() < 1e-9);
    assert_eq!(r.per_experience_map, CL_ROWS[3].0.to_vec());
    assert_eq!(format!("{:.1}", r.eap), "55.9");
}

#[test]
fn overlapping_experiences_are_rejected() {
    let mut s = precomputed_stream(&[1.0, 2.0]);
    s.experiences[1].instance_ids = vec![0];
    assert_eq!(s.validate().unwrap_err().code(), "INVALID_STREAM");
    // image overlap only matters for data-incremental streams
    s.experiences[1].instance_ids = vec![1];
    s.experiences[0].image_ids = vec![5];
    s.experiences[1].image_ids = vec![5];
    assert!(s.validate().is_ok());
    s.mode = StreamMode::DataIncrementalCategory;
    assert_eq!(s.validate().unwrap_err().code(), "INVALID_STREAM");
}

#[test]
fn partial_maps_are_rejected() {
    let mut s = precomputed_stream(&[1.0, 2.0]);
    s.experiences[1].map = None;
    let e = cl_evaluate(
        &s,
        &[vec![], vec![]],
        None,
        None,
        &EvalConfig::default(),
        &Exec::Sequential,
    )
    .unwrap_err();
    assert_eq!(e.code(), "INVALID_STREAM");
}

#[test]
fn cl_scores_predictions() {
    let d = gated(&[1]);
    let mut s = precomputed_stream(&[0.0, 0.0]);
    s.mode = StreamMode::DataIncrementalCategory;
    for (i, e) in s.experiences.iter_mut().enumerate() {
        e.map = None;
        e.image_ids = vec![100 + i as u64];
    }
    let preds = vec![gating_preds(), gating_preds()[..1].to_vec()];
    let r = cl_evaluate(&s, &preds, Some(&d), None, &at50(), &Exec::Sequential).unwrap();
    assert_eq!(r.per_experience_map, vec![50.0, 100.0]);
    assert_eq!(r.eap, 75.0);
    let json = r.to_json();
    assert!(json.contains("\"EAP\": 75.0"));
    assert!(json.contains("data_incremental_category"));
}

#[test]
fn stream_json_roundtrip() {
    let text = r#"{"mode":"class_incremental_instance","experiences":[{"instance_ids":[1,2],"map":10.0},{"instance_ids":[3],"map":20.0}]}"#;
    let s = ExperienceStream::from_json_str(text).unwrap();
    assert_eq!(s.experiences.len(), 2);
    assert!(s.has_precomputed_maps());
    let bad = r#"{"mode":"class_incremental_instance","experiences":[{"instance_ids":[1]},{"instance_ids":[1]}]}"#;
    assert_eq!(
        ExperienceStream::from_json_str(bad).unwrap_err().code(),
        "INVALID_STREAM"
    );
}

#[test]
fn report_json_field_names() {
    let cfg = EvalConfig {
        buckets: true,
        ..EvalConfig::default()
    };
    let r = federated_ap_category(&gated(&[1]), &gating_preds(), &cfg, &Exec::Sequential).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    for key in ["AP", "AP50", "AP75", "mode", "per_unit", "buckets"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert!(v["buckets"].get("AP50_bright").is_some());
    assert_eq!(v["mode"], "category");
}

#[test]
fn parallel_matches_sequential() {
    let (d, spec) = instance_fixture();
    let p = vec![
        pred(1, 1, BBox::new(0.0, 0.0, 10.0, 10.0), 0.8),
        pred(3, 1, BBox::new(50.0, 50.0, 10.0, 10.0), 0.9),
    ];
    let cfg = EvalConfig {
        buckets: true,
        ..EvalConfig::default()
    };
    let a = instance_ap(&d, &p, &spec, &cfg, &Exec::Sequential).unwrap();
    let b = instance_ap(&d, &p, &spec, &cfg, &Exec::with_threads(4)).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}

/// Micro dataset: one category on up to three images, every image listing
/// the category as negative so all images are evaluated.
#[derive(Debug, Clone)]
struct Micro {
    gts: Vec<(u64, BBox)>,
    dets: Vec<(u64, BBox, f64)>,
}

impl Micro {
    fn dataset(&self) -> Dataset {
        let mut b = DatasetBuilder::new()
            .category(1, "mug")
            .category(2, "shoe")
            .video(1, 1, 1, BRIGHT);
        for img in 1..=3 {
            b = b.image(img, 1, 64, 64, &[1]);
        }
        b = b.image(4, 1, 64, 64, &[]);
        for (i, (img, bx)) in self.gts.iter().enumerate() {
            b = b.annotation(i as u64 + 1, *img, 1, Some(1), *bx);
        }
        b.build().unwrap()
    }

    fn preds(&self) -> Vec<Prediction> {
        self.dets.iter().map(|&(img, bx, s)| pred(img, 1, bx, s)).collect()
    }
}

fn small_box() -> impl Strategy<Value = BBox> {
    (0u32..6, 0u32..6, 1u32..5, 1u32..5)
        .prop_map(|(x, y, w, h)| BBox::new(x as f64 * 4.0, y as f64 * 4.0, w as f64 * 4.0, h as f64 * 4.0))
}

fn micro() -> impl Strategy<Value = Micro> {
    (
        prop::collection::vec((1u64..=3, small_box()), 1..5),
        prop::collection::vec((1u64..=3, small_box(), 1u32..6), 0..=6),
    )
        .prop_map(|(gts, dets)| Micro {
            gts,
            dets: dets.into_iter().map(|(i, b, s)| (i, b, s as f64 / 8.0)).collect(),
        })
}

fn per_threshold(m: &Micro, preds: &[Prediction]) -> Vec<f64> {
    let r = federated_ap_category(&m.dataset(), preds, &EvalConfig::default(), &Exec::Sequential).unwrap();
    r.per_unit[0].ap_by_threshold.clone()
}

proptest! {
    #[test]
    fn engine_equals_oracle(m in micro()) {
        let got = per_threshold(&m, &m.preds());
        for (k, t) in default_iou_thresholds().into_iter().enumerate() {
            prop_assert_eq!(got[k], brute_force_ap_oracle(&m.gts, &m.dets, t));
        }
    }

    #[test]
    fn removing_a_false_positive_never_hurts(m in micro(), pick in 0usize..6) {
        let preds = m.preds();
        let fps: Vec<usize> = (0..preds.len())
            .filter(|&i| m.gts.iter().all(|(img, g)| *img != preds[i].image_id || crate::geometry::iou(g, &preds[i].bbox) == 0.0))
            .collect();
        prop_assume!(!fps.is_empty());
        let drop = fps[pick % fps.len()];
        let mut fewer = preds.clone();
        fewer.remove(drop);
        for (a, b) in per_threshold(&m, &preds).into_iter().zip(per_threshold(&m, &fewer)) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn score_scale_invariance(m in micro(), c in 0.1f64..10.0) {
        let preds = m.preds();
        let scaled: Vec<Prediction> = preds.iter().map(|p| Prediction { score: p.score * c, ..*p }).collect();
        prop_assert_eq!(per_threshold(&m, &preds), per_threshold(&m, &scaled));
    }

    #[test]
    fn ungated_predictions_have_no_effect(m in micro(), extra in prop::collection::vec((small_box(), 0.0f64..1.0), 1..4)) {
        let d = m.dataset();
        let mut preds = m.preds();
        let cfg = EvalConfig { buckets: true, ..EvalConfig::default() };
        let base = federated_ap_category(&d, &preds, &cfg, &Exec::Sequential).unwrap();
        // image 4 neither contains nor lists category 1
        preds.extend(extra.into_iter().map(|(b, s)| pred(4, 1, b, s)));
        let after = federated_ap_category(&d, &preds, &cfg, &Exec::Sequential).unwrap();
        prop_assert_eq!(base.to_json(), after.to_json());
    }

    #[test]
    fn stricter_threshold_never_scores_higher(m in micro()) {
        let aps = per_threshold(&m, &m.preds());
        for w in aps.windows(2) {
            prop_assert!(w[1] <= w[0], "{:?}", aps);
        }
    }

    #[test]
    fn eap_is_order_invariant(maps in prop::collection::vec(0.0f64..100.0, 1..8), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = maps.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (a, b) = (eap(&maps).unwrap(), eap(&shuffled).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}
