//! End-to-end flows over synthetic datasets: load, split, predict, evaluate.

use std::collections::BTreeSet;

use egobench::eval::{federated_ap_category, instance_ap, EvalConfig};
use egobench::schema::{load_dataset, load_predictions, predictions_to_json, validate, LabelSpace};
use egobench::splits::{build_splits, load_splits, verify_splits, SplitMode, SplitOptions};
use egobench::stats::{compute_stats, StatsBins};
use egobench::synth::{synth_dataset, synth_predictions, PredConfig, SynthConfig};
use egobench::{Dataset, Exec, Prediction, PredictionMode};

fn dataset(seed: u64) -> Dataset {
    synth_dataset(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
}

fn buckets() -> EvalConfig {
    EvalConfig {
        buckets: true,
        ..EvalConfig::default()
    }
}

#[test]
fn files_roundtrip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let d = dataset(1);
    let path = dir.path().join("d.json");
    std::fs::write(&path, d.to_json_string()).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.to_json_string(), d.to_json_string());

    let preds = synth_predictions(&d, PredictionMode::Category, None, &PredConfig::default());
    let ppath = dir.path().join("p.json");
    std::fs::write(&ppath, predictions_to_json(&preds, PredictionMode::Category)).unwrap();
    let loaded = load_predictions(&ppath, PredictionMode::Category, &back, LabelSpace::Dataset).unwrap();
    assert_eq!(loaded, preds);

    let spec = build_splits(&d, &SplitOptions::default()).unwrap();
    let spath = dir.path().join("s.json");
    std::fs::write(&spath, spec.to_json()).unwrap();
    assert_eq!(load_splits(&spath).unwrap(), spec);
}

#[test]
fn perfect_instance_predictions_score_one() {
    for mode in [SplitMode::Unified, SplitMode::Instdet] {
        let d = dataset(7);
        let spec = build_splits(
            &d,
            &SplitOptions {
                mode,
                seed: 3,
                ..SplitOptions::default()
            },
        )
        .unwrap();
        assert!(verify_splits(&d, &spec).is_empty());
        let targets = spec.eval_instances();
        let eval_images: BTreeSet<u64> = spec.eval_images().into_iter().collect();
        let preds: Vec<Prediction> = d
            .annotations()
            .iter()
            .filter(|a| eval_images.contains(&a.image_id))
            .filter_map(|a| {
                let i = a.instance_id.filter(|i| targets.contains(i))?;
                Some(Prediction {
                    image_id: a.image_id,
                    label: i,
                    bbox: a.bbox,
                    score: 0.5 + (a.id % 97) as f64 / 200.0,
                })
            })
            .collect();
        let r = instance_ap(&d, &preds, &spec, &buckets(), &Exec::Sequential).unwrap();
        assert_eq!(r.ap, 1.0, "{mode:?}");
        assert!(r.per_unit.iter().all(|u| u.ap == 1.0));
        let b = r.buckets.unwrap();
        for v in [
            b.ap50_s,
            b.ap50_m,
            b.ap50_l,
            b.ap50_bright,
            b.ap50_dim,
            b.ap50_simple,
            b.ap50_busy,
        ] {
            assert!(v.is_none() || v == Some(1.0));
        }
    }
}

#[test]
fn noisy_predictions_score_between_zero_and_one() {
    let d = dataset(11);
    let preds = synth_predictions(&d, PredictionMode::Category, None, &PredConfig::default());
    let r = federated_ap_category(&d, &preds, &buckets(), &Exec::Sequential).unwrap();
    assert!(r.ap > 0.0 && r.ap < 1.0, "{}", r.ap);
    assert!(r.ap50.unwrap() >= r.ap75.unwrap());
    assert_eq!(r.num_units, 4);
}

#[test]
fn instance_mode_penalizes_what_category_mode_ignores() {
    // a confident prediction of a target on every eval image where it is absent
    let d = dataset(5);
    let spec = build_splits(&d, &SplitOptions::default()).unwrap();
    let target = *spec.eval_instances().iter().next().unwrap();
    let present: BTreeSet<u64> = d
        .annotations()
        .iter()
        .filter(|a| a.instance_id == Some(target))
        .map(|a| a.image_id)
        .collect();
    let mut preds: Vec<Prediction> = d
        .annotations()
        .iter()
        .filter(|a| a.instance_id == Some(target))
        .map(|a| Prediction {
            image_id: a.image_id,
            label: target,
            bbox: a.bbox,
            score: 0.5,
        })
        .collect();
    let clean = instance_ap(&d, &preds, &spec, &EvalConfig::default(), &Exec::Sequential).unwrap();
    let absent = spec.eval_images().into_iter().find(|i| !present.contains(i)).unwrap();
    preds.push(Prediction {
        image_id: absent,
        label: target,
        bbox: egobench::BBox::new(0.0, 0.0, 50.0, 50.0),
        score: 0.99,
    });
    let noisy = instance_ap(&d, &preds, &spec, &EvalConfig::default(), &Exec::Sequential).unwrap();
    let unit = |r: &egobench::eval::EvalReport| r.per_unit.iter().find(|u| u.id == target).unwrap().ap;
    assert_eq!(unit(&clean), 1.0);
    assert!(unit(&noisy) < 1.0);
}

#[test]
fn parallel_and_sequential_agree() {
    let d = synth_dataset(&SynthConfig {
        seed: 21,
        categories: 6,
        videos_per_main: 4,
        ..SynthConfig::default()
    });
    let preds = synth_predictions(
        &d,
        PredictionMode::Category,
        None,
        &PredConfig {
            seed: 4,
            ..PredConfig::default()
        },
    );
    let spec = build_splits(
        &d,
        &SplitOptions {
            mode: SplitMode::Instdet,
            seed: 2,
            ..SplitOptions::default()
        },
    )
    .unwrap();
    let ipreds = synth_predictions(
        &d,
        PredictionMode::Instance,
        Some(&spec.eval_instances()),
        &PredConfig::default(),
    );
    for exec in [Exec::Parallel, Exec::with_threads(3), Exec::with_threads(8)] {
        let a = federated_ap_category(&d, &preds, &buckets(), &Exec::Sequential).unwrap();
        let b = federated_ap_category(&d, &preds, &buckets(), &exec).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let a = instance_ap(&d, &ipreds, &spec, &buckets(), &Exec::Sequential).unwrap();
        let b = instance_ap(&d, &ipreds, &spec, &buckets(), &exec).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let bins = StatsBins::default();
        assert_eq!(
            compute_stats(&d, &bins, &Exec::Sequential).unwrap(),
            compute_stats(&d, &bins, &exec).unwrap()
        );
    }
}

#[test]
fn statistics_are_consistent_with_the_dataset() {
    let d = dataset(3);
    assert!(validate(&d).is_empty());
    let r = compute_stats(&d, &StatsBins::default(), &Exec::Sequential).unwrap();
    let (_, _, images, anns) = d.counts();
    assert_eq!(
        r.categories.iter().map(|c| c.annotation_count).sum::<u64>(),
        anns as u64
    );
    assert_eq!(r.centers_all.total(), anns as u64);
    assert_eq!(r.sizes_all.total(), anns as u64);
    assert_eq!(r.summary.images, images as u64);
    // every frame has exactly one main annotation
    assert_eq!(r.centers_main.total(), images as u64);
    let incidences = r.summary.mean_instances_per_image * images as f64;
    assert!((incidences - r.summary.incidences as f64).abs() < 1e-9);
}
