use dropclass::config::Config;
use dropclass::datagen::{erase_class, generate_dataset, pixel_frequencies, Split};
use dropclass::eval::{evaluate, iou_per_class, miou_dagger};
use dropclass::model::{load_checkpoint, save_checkpoint};
use dropclass::trainer::{trace_csv, train, Mode, TrainConfig};
use dropclass::{LabelMap, IGNORE_LABEL};
use proptest::prelude::*;

fn small_config(mode: Mode) -> TrainConfig {
    let mut cfg = TrainConfig::new(mode, 6);
    cfg.iterations = 30;
    cfg.batch_size = 2;
    cfg.learning_rate = 0.01;
    cfg.model.widths = vec![4, 4];
    cfg.seed = 4;
    cfg
}

#[test]
fn trained_model_survives_a_checkpoint_round_trip() {
    let spec = Config {
        image_size: 16,
        ..Config::default()
    }
    .scene()
    .unwrap();
    let train_set = generate_dataset(&spec, 12, 0, Split::Train).unwrap();
    let test_set = generate_dataset(&spec, 4, 1 << 30, Split::Test).unwrap();
    let report = train(&train_set, &small_config(Mode::Dropclass)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dcm1");
    save_checkpoint(&report.model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, report.model);
    for s in &test_set.samples {
        assert_eq!(
            loaded.predict(&s.image).unwrap(),
            report.model.predict(&s.image).unwrap()
        );
    }
    assert_eq!(
        evaluate(&loaded, &test_set).unwrap(),
        evaluate(&report.model, &test_set).unwrap()
    );
}

#[test]
fn every_mode_is_reproducible_and_distinct_from_baseline() {
    let spec = Config {
        image_size: 16,
        ..Config::default()
    }
    .scene()
    .unwrap();
    let train_set = generate_dataset(&spec, 10, 0, Split::Train).unwrap();
    let baseline = trace_csv(
        &train(&train_set, &small_config(Mode::Baseline))
            .unwrap()
            .trace,
    );
    for mode in [
        Mode::Dropclass,
        Mode::AblationNoSup,
        Mode::AblationLabelDrop,
    ] {
        let a = trace_csv(&train(&train_set, &small_config(mode)).unwrap().trace);
        let b = trace_csv(&train(&train_set, &small_config(mode)).unwrap().trace);
        assert_eq!(a, b, "{mode:?}");
        assert_ne!(a, baseline, "{mode:?}");
    }
}

#[test]
fn erasing_every_class_but_one_leaves_only_that_class() {
    let spec = Config::default().scene().unwrap();
    let ds = generate_dataset(&spec, 20, 77, Split::Val).unwrap();
    let fill = ds.mean_color();
    let kept = 2;
    let erased: Vec<_> = ds
        .samples
        .iter()
        .map(|s| {
            (0..6)
                .filter(|&c| c != kept)
                .fold(s.clone(), |acc, c| erase_class(&acc, c, fill))
        })
        .collect();
    let freqs = dropclass::datagen::pixel_frequencies_of(erased.iter().map(|s| &s.label), 6);
    assert_eq!(freqs[kept], 1.0);
    assert!(pixel_frequencies(&ds)[kept] < 1.0);
}

fn label_map(data: Vec<u8>) -> LabelMap {
    LabelMap::new(4, 4, data).unwrap()
}

proptest! {
    #[test]
    fn perfect_predictions_score_one(labels in prop::collection::vec(0u8..5, 16)) {
        let l = label_map(labels.clone());
        let report = iou_per_class(&[l.clone()], &[l], 5).unwrap();
        for (c, v) in report.iou.iter().enumerate() {
            prop_assert_eq!(v.is_some(), labels.contains(&(c as u8)));
            if let Some(v) = v {
                prop_assert_eq!(*v, 1.0);
            }
        }
        prop_assert_eq!(report.miou, 1.0);
    }

    #[test]
    fn iou_is_bounded_and_ignores_ignore_pixels(
        pred in prop::collection::vec(0u8..5, 16),
        labels in prop::collection::vec(prop_oneof![4 => 0u8..5, 1 => Just(IGNORE_LABEL)], 16),
        other in prop::collection::vec(0u8..5, 16),
    ) {
        let report = iou_per_class(&[label_map(pred.clone())], &[label_map(labels.clone())], 5).unwrap();
        for v in report.iou.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(v));
        }
        // Changing predictions only where the label is ignore changes nothing.
        let swapped: Vec<u8> = pred.iter().zip(&labels).zip(&other)
            .map(|((&p, &l), &o)| if l == IGNORE_LABEL { o } else { p })
            .collect();
        let again = iou_per_class(&[label_map(swapped)], &[label_map(labels)], 5).unwrap();
        prop_assert_eq!(report.iou, again.iou);
    }

    #[test]
    fn rare_half_miou_is_a_mean_of_rare_ious(
        labels in prop::collection::vec(0u8..4, 16),
        pred in prop::collection::vec(0u8..4, 16),
        weights in prop::collection::vec(0.01f64..1.0, 4),
    ) {
        let total: f64 = weights.iter().sum();
        let freqs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let report = iou_per_class(&[label_map(pred)], &[label_map(labels)], 4).unwrap();
        if let Ok(d) = miou_dagger(&report, &freqs) {
            let defined: Vec<f64> = report.iou.iter().flatten().copied().collect();
            let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(d >= lo - 1e-12 && d <= hi + 1e-12);
        }
    }
}
