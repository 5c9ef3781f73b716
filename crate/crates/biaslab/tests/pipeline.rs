//! Cross-module integration on the planted-bias benchmark at reduced desk
//! scale: train, audit with CBI and GEBI, mitigate, and check the
//! qualitative structure end to end.

mod common;

use biaslab::cbi::{self, BiasTransform, CircleParams, FrameParams};
use biaslab::dataset::{ArtifactKind, Dataset, Split};
use biaslab::gebi::{self, GebiConfig, GebiMode};
use biaslab::mitigation::{self, AugmentationPolicy, FeedbackConfig};
use biaslab::model::{evaluate, TinyCnn, TrainConfig};
use biaslab::synthdata::{generate, ArtifactPlanEntry, GeneratorSpec};

const MODEL_SIDE: usize = 32;

fn planted_spec(n_per_class: usize, p_frame_0: f64, p_frame_1: f64, seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        n_per_class,
        side: 64,
        artifact_plan: vec![ArtifactPlanEntry {
            kind: ArtifactKind::Frame,
            p_class0: p_frame_0,
            p_class1: p_frame_1,
        }],
        seed,
        ..GeneratorSpec::default()
    }
}

fn train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}

fn train_model(dataset: &Dataset, seed: u64) -> TinyCnn {
    let mut model = TinyCnn::new(MODEL_SIDE, 2, seed).unwrap();
    let train = dataset.with_split(Split::Train);
    model.train(&train, &train_cfg(seed), None).unwrap();
    model
}

#[test]
fn artifact_free_training_reaches_90_percent() {
    let spec = GeneratorSpec {
        n_per_class: 300,
        side: 64,
        artifact_plan: vec![],
        seed: 11,
        ..GeneratorSpec::default()
    };
    let dataset = generate(&spec).unwrap();
    let model = train_model(&dataset, 1);
    let test = dataset.with_split(Split::Test);
    let report = evaluate(&model, &test).unwrap();
    println!(
        "artifact-free: accuracy {:.3}, f1 {:.3}",
        report.accuracy, report.per_class[1].f1
    );
    assert!(
        report.accuracy >= 0.90,
        "clean accuracy {} below the 90% calibration target",
        report.accuracy
    );
}

#[test]
fn planted_frames_bias_the_model_and_cbi_detects_it() {
    let spec = planted_spec(300, 0.1, 0.9, 101);
    let dataset = generate(&spec).unwrap();
    let model = train_model(&dataset, 108);
    let test = dataset.with_split(Split::Test);

    let frame_report = cbi::run_cbi(
        &model,
        &test,
        &BiasTransform::Frame(FrameParams::default()),
        77,
    )
    .unwrap();
    let circle_report = cbi::run_cbi(
        &model,
        &test,
        &BiasTransform::Circle(CircleParams::default()),
        77,
    )
    .unwrap();
    println!(
        "frame:  switched {}/{} (mean change {:.4})",
        frame_report.switched_total, frame_report.sample_count, frame_report.mean_change
    );
    println!(
        "circle: switched {}/{} (mean change {:.4})",
        circle_report.switched_total, circle_report.sample_count, circle_report.mean_change
    );
    assert!(
        frame_report.switched_fraction() >= 0.10,
        "frame switched fraction {} below 10%",
        frame_report.switched_fraction()
    );
    assert!(
        frame_report.switched_total >= 3 * circle_report.switched_total.max(1),
        "frame {} vs circle {} switched",
        frame_report.switched_total,
        circle_report.switched_total
    );
}

#[test]
fn gebi_surfaces_the_frame_cluster() {
    let spec = planted_spec(400, 0.1, 0.8, 31);
    let dataset = generate(&spec).unwrap();
    let model = train_model(&dataset, 3);
    let test = dataset.with_split(Split::Test);

    let cfg = GebiConfig {
        mode: GebiMode::Gebi,
        target_class: 1,
        cluster_k: Some(2),
        seed: 5,
        ..GebiConfig::default()
    };
    let report = gebi::run_gebi(&test, &model, &cfg).unwrap();
    let mut freqs: Vec<f64> = report
        .clusters
        .iter()
        .map(|c| c.artifact_frequency.frame)
        .collect();
    freqs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    println!("gebi frame frequencies per cluster: {freqs:?}");
    assert!(freqs[0] >= 0.8, "no frame-dominated cluster: {freqs:?}");
    let rest: f64 = freqs[1..].iter().sum::<f64>() / (freqs.len() - 1) as f64;
    assert!(rest <= 0.3, "remaining clusters average {rest}");

    // spray-mode purity must not beat gebi-mode purity on the same inputs
    let spray_cfg = GebiConfig {
        mode: GebiMode::Spray,
        ..cfg.clone()
    };
    let spray = gebi::run_gebi(&test, &model, &spray_cfg).unwrap();
    println!(
        "frame purity: gebi {} vs spray {}",
        report.best_purity.frame, spray.best_purity.frame
    );
    assert!(report.best_purity.frame >= spray.best_purity.frame - 1e-12);
}

#[test]
fn gebi_k1_reproduces_marginals_and_shuffle_invariance() {
    let spec = planted_spec(150, 0.2, 0.7, 41);
    let dataset = generate(&spec).unwrap();
    let model = train_model(&dataset, 4);
    let test = dataset.with_split(Split::Test);
    let cfg = GebiConfig {
        mode: GebiMode::IsoSpray,
        target_class: 1,
        attribution_dims: 5,
        image_dims: 3,
        cluster_k: Some(1),
        knn_k: 8,
        seed: 9,
        ..GebiConfig::default()
    };
    let report = gebi::run_gebi(&test, &model, &cfg).unwrap();
    assert_eq!(report.clusters.len(), 1);
    let class1_test: Vec<_> = test.iter().filter(|s| s.label == 1).collect();
    let marginal = class1_test
        .iter()
        .filter(|s| s.annotation.frame)
        .count() as f64
        / class1_test.len() as f64;
    assert!((report.clusters[0].artifact_frequency.frame - marginal).abs() < 1e-12);

    // shuffling the dataset must not change the partition
    let mut shuffled: Vec<&biaslab::dataset::Sample> = test.clone();
    shuffled.reverse();
    let report2 = gebi::run_gebi(&shuffled, &model, &cfg).unwrap();
    let mut ids1: Vec<Vec<u64>> = report
        .clusters
        .iter()
        .map(|c| {
            let mut v = c.member_ids.clone();
            v.sort_unstable();
            v
        })
        .collect();
    let mut ids2: Vec<Vec<u64>> = report2
        .clusters
        .iter()
        .map(|c| {
            let mut v = c.member_ids.clone();
            v.sort_unstable();
            v
        })
        .collect();
    ids1.sort();
    ids2.sort();
    assert_eq!(ids1, ids2);
}

#[test]
fn tda_halves_switched_predictions() {
    let spec = planted_spec(300, 0.1, 0.9, 51);
    let dataset = generate(&spec).unwrap();
    let cfg = train_cfg(51);
    let test_transform = BiasTransform::Frame(FrameParams::default());

    let mut baseline = TinyCnn::new(MODEL_SIDE, 2, 58).unwrap();
    let p0 = AugmentationPolicy::single(BiasTransform::Frame(FrameParams::default()), 0.0);
    let r0 =
        mitigation::tda_train(&mut baseline, &dataset, &p0, &cfg, &test_transform, 99).unwrap();
    let cbi0 = cbi::run_cbi(
        &baseline,
        &dataset.with_split(Split::Test),
        &test_transform,
        99,
    )
    .unwrap();

    let mut mitigated = TinyCnn::new(MODEL_SIDE, 2, 58).unwrap();
    let p05 = AugmentationPolicy::single(BiasTransform::Frame(FrameParams::default()), 0.5);
    let r05 =
        mitigation::tda_train(&mut mitigated, &dataset, &p05, &cfg, &test_transform, 99).unwrap();
    let cbi05 = cbi::run_cbi(
        &mitigated,
        &dataset.with_split(Split::Test),
        &test_transform,
        99,
    )
    .unwrap();

    println!(
        "p=0:   switched {} f1_org {:.3} f1_aug {:.3} f1_mean {:.3}",
        cbi0.switched_total, r0.f1_org, r0.f1_aug, r0.f1_mean
    );
    println!(
        "p=0.5: switched {} f1_org {:.3} f1_aug {:.3} f1_mean {:.3}",
        cbi05.switched_total, r05.f1_org, r05.f1_aug, r05.f1_mean
    );
    assert!(
        cbi0.switched_total >= 12,
        "baseline model is not frame-reliant enough to test mitigation"
    );
    assert!(
        (cbi05.switched_total as f64) <= 0.5 * cbi0.switched_total as f64,
        "TDA did not halve switched: {} -> {}",
        cbi0.switched_total,
        cbi05.switched_total
    );
    assert!(r05.f1_mean > r0.f1_mean, "f1_mean did not improve");
}

#[test]
fn feedback_finetune_reduces_switched_and_attribution_gap() {
    let spec = planted_spec(300, 0.1, 0.9, 72);
    let dataset = generate(&spec).unwrap();
    let mut model = train_model(&dataset, 79);
    let test = dataset.with_split(Split::Test);
    let transform = BiasTransform::Frame(FrameParams::default());

    let before_cbi = cbi::run_cbi(&model, &test, &transform, 13).unwrap();
    let before_eval = evaluate(&model, &test).unwrap();
    let before_gap = mitigation::mean_attribution_gap(&model, &test, &transform, 13).unwrap();

    let fb = FeedbackConfig {
        alpha: 0.5,
        epochs: 6,
        learning_rate: 0.05,
        batch_size: 16,
        lr_decay: 0.9,
        seed: 7,
        transform: BiasTransform::Frame(FrameParams::default()),
    };
    let train = dataset.with_split(Split::Train);
    mitigation::feedback_finetune(&mut model, &train, &fb).unwrap();

    let after_cbi = cbi::run_cbi(&model, &test, &transform, 13).unwrap();
    let after_eval = evaluate(&model, &test).unwrap();
    let after_gap = mitigation::mean_attribution_gap(&model, &test, &transform, 13).unwrap();

    println!(
        "switched {} -> {}, f1_org {:.3} -> {:.3}, gap {:.6} -> {:.6}",
        before_cbi.switched_total,
        after_cbi.switched_total,
        before_eval.per_class[1].f1,
        after_eval.per_class[1].f1,
        before_gap,
        after_gap
    );
    assert!(
        before_cbi.switched_total >= 12,
        "pretrained model is not frame-reliant enough to test mitigation"
    );
    assert!(
        (after_cbi.switched_total as f64) <= 0.7 * before_cbi.switched_total as f64,
        "switched {} -> {}",
        before_cbi.switched_total,
        after_cbi.switched_total
    );
    assert!(
        after_eval.per_class[1].f1 >= before_eval.per_class[1].f1 - 0.05,
        "clean F1 degraded too much"
    );
    assert!(
        after_gap < before_gap,
        "held-out attribution gap did not shrink: {before_gap} -> {after_gap}"
    );
}
